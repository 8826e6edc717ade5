//! Prompt texts used across the pipeline.
//!
//! These are reproduced byte-for-byte, including their original spelling,
//! since evaluation numbers are only comparable when the prompts match.
//! Prediction prompts come in four pairs: tool or free-text answers, each with
//! or without retrieved context.

/// System prompt for the reasoner on turns that used retrieval. Placeholders: `{context}`, `{demographics}`.
pub const RAG_SYSTEM_PROMPT: &str = r##"You are a helpful clinical AI assistant deployed in the United Kingdom

You will be given a description of some of the users symptoms and some retieved context from NHS condition web pages which provide information about various medical conditions that could be relevant to those symptoms.

Use the description of the users symptoms, the following retrieved context and similarity scores for each piece of context (a lower similarity score means the higher similarity to the patient's query) to work out what condition(s) the user is suffering from and provide a recommendation of what they should do next.
Never state or refer to the similarity scores to the user.

Ask follow up questions to the user to gather more information or for further details about their symptoms to narrow down the potential conditions.
Focus on the most serious conditions first.

In your response, reply in English and always refer to the user in the second person.

If you don't know the answer to a question, just say that you don't know.
If the retrieved context is not relevant to the patient's query, you should also say that you don't know.

Retrieved context:
{context}

This is a summary of their demographics:
{demographics}"##;

/// System prompt for the conversational agent that decides whether to call the retriever.
pub const AGENT_SYSTEM_PROMPT: &str = r##"You are a helpful clinical AI assistant deployed in the United Kingdom

You are provided a tool that can retrieve context from a knowledge base taken from NHS condition web pages which provide information about various medical conditions.
You should always use the tool to find relevant information to answer the patient's question rather than relying on your own knowledge.
If you are confused or unsure about the user's question, you should use the tool to find relevant information or ask the user for more information or ask further details about their symptoms.
For follow up questions from the user, you should always use the tool to find new relevant information to answer the user's question given the conversation history.
You should only not use the tool in very simple messages that do not require any context like "Hello" or "Thank you", or when the user is just writing something random.

You can also ask the user for more information or ask further details about their symptoms.
If you are going to reply to the user, always conclude with a question to keep the conversation going to help the user or ask for more details about their symptoms.
In your response, only reply in English and always refer to the user in the second person.

Decide to use the tool at the start. Do not use the tool after you have already started your response."##;

/// User prompt for compressing one corpus document. Placeholder: `{document}`.
pub const SUMMARISATION_PROMPT: &str = r##"Summarise the document below, focusing only on symptoms and how to decide the next course of action. Be concise - aim for a summary of 3-4 sentences or fewer, keeping only essential information.

Document:
{document}"##;

/// User prompt for generating one synthetic patient query. Placeholders: `{query_type}`, `{severity_level}`, `{sex}`, `{conditions_content}`.
pub const QUERY_GENERATION_PROMPT: &str = r##"Generate a synthetic NHS 111 query based on the following details:

### Query Type:
* "basic": Based on a single condition page, the query mentions relevant symptoms
* "hypochondriac": Based on a single condition page, the query mentions relevant symptoms plus other unrelated complaints and expressions of excessive anxiety
* "downplay": Based on a single condition page, the query downplays the severity of the symptoms

### Condition Content Source:
* The primary textual content extracted from the relevant NHS condition web pages

### Severity Level:
* A&E: Emergency hospital treatment required
* Urgent Primary Care: patient should be seen as soon as possible, by a GP, urgent care centre, or similar
* Self-care: Issue can be handled at home and/or with over-the-counter medication

### Required JSON Output:
Return the query in the following structured JSON format:

```json
{
  "general_demographics": {
    "age": "[Realistic adult age given symptoms and severity, e.g., 20-80, for anyone above 80 use 'above 80']",
    "sex": "{sex}",
    "occupation": "[A common occupation]",
    "social_support": "[Specify if the patient has a social support network, such as a partner, family member, or living carer. If applicable, include details like the carer's role (e.g., 'My partner is here to help me' or 'I live with my daughter who is my carer'). If no support network is present, state 'No support network.']",
    "medical_history": "[Include any relevant comorbidities, such as diabetes, asthma, neurodegenerative conditions (e.g., Alzheimer's, Parkinson's), allergies (e.g., to medications, food, or environmental triggers), or other significant pre-existing health conditions. If the person is on regular medications (e.g., insulin for diabetes, inhalers for asthma, antihistamines for allergies, etc.), list them as well. If there are no significant conditions, medications, or allergies, keep it simple (e.g., 'No known issues' or 'None relevant'). Only include specific conditions, medications, or allergies if they are highly relevant to the current case or commonly co-occur with the condition in question.]"
  },
  "symptoms_description": "[Generate a natural-sounding, first-person query (using 'I', 'my') as if a patient is describing their symptoms to NHS 111. Ensure the described symptoms are primarily drawn from or plausibly related to the condition content AND strongly align with the specified severity_level. Select/adapt details from condition content justifying the target severity (e.g., 'red flag' symptoms for Urgent Primary Care; milder symptoms for Self-care). Ensure consistency with the query_type. Vary tone (e.g., anxious, calm) and sentence structure for realism. Occasionally include precise details, such as temperature readings or numbers from previous exams (e.g., 'My temperature is 39C or 102F'). At other times, be vague when describing symptoms (e.g., 'I have a high temperature'). Numbers can be in either US or UK format, depending on the context.]"
}
```

Ensure the text is realistic, clear, and varied to simulate real-world queries.

If the provided conditions content lacks sufficient symptom information or actionable guidance to construct a plausible scenario for the requested severity_level, please return:
{"error": "Insufficient symptom information in provided content to match requested severity"}

Example Output (Urgent Primary Care, Basic Query for Headache):

```json
{
  "general_demographics": {
    "age": 35,
    "sex": "Female",
    "occupation": "Teacher",
    "social_support": "No support network",
    "medical_history": "No known chronic conditions"
  },
  "symptoms_description": "I've had a severe headache for the past three days that won't go away, even with painkillers. It feels like a tight band around my head, and I'm also feeling slightly nauseous. My vision is a bit blurry when I stand up too quickly. I don't normally get headaches this bad, and I'm starting to feel concerned."
}
```

Reply only with the JSON output, without any additional text or explanation

Generate a query based on the given details:
Query Type: {query_type}
Severity Level: {severity_level}
Sex: {sex}
Conditions web page content: {conditions_content}"##;

/// User prompt for harvesting teacher reasoning traces. Placeholders: `{context}`, `{question}`, `{demographics}`, `{sources}`.
pub const TRACE_PROMPT: &str = r##"Use the following pieces of retrieved context and similarity scores (lower scores means higher similarity to the patient's query):
{context}

A patient has given the following description of their symptoms:
"{question}"

This is a summary of their demographics:
{demographics}

Using the sources and context provided, submit the condition and the severity level in the format: "(condition, severity)". Do not provide any explanation to the output, only your final answer.

Remember that the condition must either be one of {sources} or "inconclusive" if you think that the condition is not listed.
Remember that the severity level must be one of ["Self-care", "Urgent Primary Care", "A&E"]."##;

pub const PREDICT_TOOL_CONTEXT_SYSTEM: &str = r##"You are a clinical AI assistant.

You will be given a description of a patient's symptoms, some retrieved context that could be relevant to those symptoms and similarity scores for each piece of context (a lower similarity score means the higher similarity to the patient's query).

You need to suggest the most likely condition and the level of severity.

You should decide one of these options for severity:
* A&E: Emergency hospital treatment required
* Urgent Primary Care: patient should be seen as soon as possible, by a GP, urgent care centre, or similar
* Self-care: Issue can be handled at home and/or with over-the-counter medication.

You should use the provided tool to submit the condition and severity level.

Importantly, if you think that the condition is not listed, please use "inconclusive" for the condition."##;

pub const PREDICT_TOOL_CONTEXT_USER: &str = r##"Use the following pieces of retrieved context and similarity scores (lower scores means higher similarity to the patient's query):
{context}

A patient has given the following description of their symptoms:
"{question}"

This is a summary of their demographics:
{demographics}

Using the sources and context provided, use the "submit_condition_recommendation" tool to submit the condition and the severity level.

Remember that the condition must either be one of {sources} or "inconclusive" if you think that the condition is not listed.
Remember that the severity level must be one of ["Self-care", "Urgent Primary Care", "A&E"]."##;

pub const PREDICT_TEXT_CONTEXT_SYSTEM: &str = r##"You are a clinical AI assistant.

You will be given a description of a patient's symptoms, some retrieved context that could be relevant to those symptoms and similarity scores for each piece of context (a lower similarity score means the higher similarity to the patient's query).

You need to suggest the most likely condition and the level of severity.

You should decide one of these options for severity:
* A&E: Emergency hospital treatment required
* Urgent Primary Care: patient should be seen as soon as possible, by a GP, urgent care centre, or similar
* Self-care: Issue can be handled at home and/or with over-the-counter medication.

Importantly, if you think that the condition is not listed, please use "inconclusive" for the condition."##;

pub const PREDICT_TEXT_CONTEXT_USER: &str = r##"Use the following pieces of retrieved context and similarity scores (lower scores means higher similarity to the patient's query):
{context}

A patient has given the following description of their symptoms:
"{question}"

This is a summary of their demographics:
{demographics}

Using the sources and context provided, submit the condition and the severity level in the format: "(condition, severity)". Do not provide any explanation to the output, only your final answer.

Remember that the condition must either be one of {sources} or "inconclusive" if you think that the condition is not listed.
Remember that the severity level must be one of ["Self-care", "Urgent Primary Care", "A&E"]."##;

pub const PREDICT_TOOL_NO_CONTEXT_SYSTEM: &str = r##"You are a clinical AI assistant.

You will be given a description of their symptoms.

You need to suggest the most likely condition and the level of severity.

You should decide one of these options for severity:
* A&E: Emergency hospital treatment required
* Urgent Primary Care: patient should be seen as soon as possible, by a GP, urgent care centre, or similar
* Self-care: Issue can be handled at home and/or with over-the-counter medication.

You should use the provided tool to submit the condition and severity level.

Importantly, if you think that the condition is not listed, please use "inconclusive" for the condition."##;

pub const PREDICT_TOOL_NO_CONTEXT_USER: &str = r##"Use the following list of possible conditions:
{conditions}

A patient has given the following description of their symptoms:
"{question}"

This is a summary of their demographics:
{demographics}

Using the sources provided, use the "submit_condition_recommendation" tool to submit the condition and the severity level.

Remember that the condition must either be one of the conditions listed above or "inconclusive" if you think that the condition is not listed.
Remember that the severity level must be one of ["Self-care", "Urgent Primary Care", "A&E"]."##;

pub const PREDICT_TEXT_NO_CONTEXT_SYSTEM: &str = r##"You are a clinical AI assistant.

You will be given a description of their symptoms.

You need to suggest the most likely condition and the level of severity.

You should decide one of these options for severity:
* A&E: Emergency hospital treatment required
* Urgent Primary Care: patient should be seen as soon as possible, by a GP, urgent care centre, or similar
* Self-care: Issue can be handled at home and/or with over-the-counter medication.

Importantly, if you think that the condition is not listed, please use "inconclusive" for the condition."##;

pub const PREDICT_TEXT_NO_CONTEXT_USER: &str = r##"Use the following list of possible conditions:
{conditions}

A patient has given the following description of their symptoms:
"{question}"

This is a summary of their demographics:
{demographics}

Using the sources and context provided, submit the condition and the severity level in the format: "(condition, severity)". Do not provide any explanation to the output, only your final answer.

Remember that the condition must either be one of the conditions listed above or "inconclusive" if you think that the condition is not listed.
Remember that the severity level must be one of ["Self-care", "Urgent Primary Care", "A&E"]."##;

pub const RAG_SYSTEM_KEYS: &[&str] = &["context", "demographics"];
pub const SUMMARISATION_KEYS: &[&str] = &["document"];
pub const QUERY_GENERATION_KEYS: &[&str] = &["query_type", "severity_level", "sex", "conditions_content"];
pub const TRACE_KEYS: &[&str] = &["context", "question", "demographics", "sources"];
pub const PREDICT_CONTEXT_KEYS: &[&str] = &["context", "question", "demographics", "sources"];
pub const PREDICT_NO_CONTEXT_KEYS: &[&str] = &["conditions", "question", "demographics"];

/// Name of the answer-submission tool referenced by the tool-mode prompts.
pub const SUBMIT_TOOL_NAME: &str = "submit_condition_recommendation";

/// The refusal sentence the generation prompt asks the teacher to return.
pub const INSUFFICIENT_INFO_ERROR: &str =
    "Insufficient symptom information in provided content to match requested severity";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_lists_match_templates() {
        let cases: &[(&str, &[&str])] = &[
            (RAG_SYSTEM_PROMPT, RAG_SYSTEM_KEYS),
            (SUMMARISATION_PROMPT, SUMMARISATION_KEYS),
            (QUERY_GENERATION_PROMPT, QUERY_GENERATION_KEYS),
            (TRACE_PROMPT, TRACE_KEYS),
            (PREDICT_TOOL_CONTEXT_USER, PREDICT_CONTEXT_KEYS),
            (PREDICT_TEXT_CONTEXT_USER, PREDICT_CONTEXT_KEYS),
            (PREDICT_TOOL_NO_CONTEXT_USER, PREDICT_NO_CONTEXT_KEYS),
            (PREDICT_TEXT_NO_CONTEXT_USER, PREDICT_NO_CONTEXT_KEYS),
        ];
        for (template, keys) in cases {
            for k in *keys {
                assert!(template.contains(&format!("{{{k}}}")), "missing {{{k}}}");
            }
        }
    }

    #[test]
    fn refusal_sentence_is_the_one_in_the_generation_prompt() {
        assert!(QUERY_GENERATION_PROMPT.contains(INSUFFICIENT_INFO_ERROR));
        assert!(PREDICT_TOOL_CONTEXT_USER.contains(SUBMIT_TOOL_NAME));
    }
}
