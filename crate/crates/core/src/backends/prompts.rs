//! Prompt templates for cue evaluation and schema generation.

use crate::schema::DataItem;

/// Per-item pieces of the evaluation prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvaluationTemplate {
    pub question: &'static str,
    pub instructions: &'static str,
    pub final_instructions: &'static str,
}

const CHOOSE_ONE: &str = "You can only use one of these, do not modify or invent your own options. Put the selected option in between ### and ###";

pub fn evaluation_template(item: DataItem) -> EvaluationTemplate {
    match item {
        DataItem::BuildingAge => EvaluationTemplate {
            question: "What is the age of this apartment?",
            instructions: "Finally, select one of these options: before 1900, 1900-1930, 1930-1950, 1950-1970, 1970-1990, 1990-2020, 2020-now",
            final_instructions: CHOOSE_ONE,
        },
        DataItem::Lighting => EvaluationTemplate {
            question: "What type of lighting does this apartment have?",
            instructions: "Finally, select one of these options: no low energy lighting, low energy in 20%, low energy in 40%, low energy in 60%, low energy in 80%, low energy in 100%",
            final_instructions: CHOOSE_ONE,
        },
        DataItem::Heating => EvaluationTemplate {
            question: "What type of heating does this apartment have?",
            instructions: "Finally, select one of these options: underfloor heating, water radiators, electric heaters, electric storage heaters, warm air from vents",
            final_instructions: CHOOSE_ONE,
        },
        DataItem::Windows => EvaluationTemplate {
            question: "What type of windows does this apartment have?",
            instructions: "Finally, select one option: (1) single glazed, (2) double glazed, (3) high efficiency double or triple glazed",
            final_instructions: CHOOSE_ONE,
        },
        DataItem::WindowsUvalue => EvaluationTemplate {
            question: "Estimate the U-value of the windows of this apartment.",
            instructions: "Finally, give an estimate of the U-value of the windows in W/m2K",
            final_instructions: "Put the estimated U-value in between ### and ###. Do not include any other text apart from the U-value",
        },
        DataItem::Energy => EvaluationTemplate {
            question: "Estimate the energy consumption in kwh per metre squared for the following apartment.",
            instructions: "Finally, give an estimate of the kwh. A highly efficient apartment might have a kwh/m2 value as low as 35 or better. An inefficient apartment might have a kwh/m2 value as high as 450 or worse",
            final_instructions: "Put the estimated kwh in between ### and ###. Do not include any other text apart from the kwh values",
        },
    }
}

/// Assembles the full evaluation prompt for one building.
pub fn evaluation_prompt(item: DataItem, region: &str, cue_list: &str) -> String {
    let t = evaluation_template(item);
    format!(
        "The images below belong to the same apartment. The building is located in {region}.\n\
         {question}\n\
         Make your judgement focusing on the presence of the following features: {cue_list}\n\
         For each feature, say yes if it is visible, no if it is not visible or n/a if it is not applicable, then provide a short explanation.\n\
         {instructions}.\n\
         {final_instructions}",
        question = t.question,
        instructions = t.instructions,
        final_instructions = t.final_instructions,
    )
}

/// Item-specific middle of the feature extraction prompt.
pub fn feature_extraction_task(item: DataItem) -> &'static str {
    match item {
        DataItem::BuildingAge => "Your task is to provide a detailed label of every architectural feature for the building that will help determine the age of the building whether it is before 1900, 1900-1930, 1930-1950, 1950-1970, 1970-1990, 1990-2020, 2020-now. List 50 visible features that are significant for building age.",
        DataItem::Lighting => "Your task is to provide a detailed label of every visible feature in the images relating to artificial lights for the building that will help determine the type of lighting whether it is no low energy lighting, low energy in 20%, low energy in 40%, low energy in 60%, low energy in 80%, low energy in 100%. List 50 visible features that are significant for determining the type of bulbs used in the lights. Don't explain the label.",
        DataItem::Heating => "Your task is to provide a detailed label of every visible feature in the images relating to heating type that will help determine the type of heating used whether it is underfloor heating, water radiators, electric heaters, electric storage heaters or warm air from vents. List 50 visible features that are significant for determining the type of heating used in the apartment. Don't explain the label.",
        DataItem::Windows | DataItem::WindowsUvalue => "Your task is to provide a detailed label of every architectural feature for the building that will help determine whether the glazing in the windows is single, double, or high efficiency. List 50 detailed visible features that are significant for window types.",
        DataItem::Energy => "Your task is to provide a detailed label of every visible architectural feature, appliance and energy consuming device in the images that will help determine the energy consumption in kwh per metre squared. Do not list furnishings or belongings, focus on visible items relevant to energy consumption or saving. List 50, with no explanations.",
    }
}

pub fn feature_extraction_prompt(item: DataItem, region: &str) -> String {
    format!(
        "You are a surveyor. You are given a set of images that belong to the same building.\n\
         {}\n\
         The building is located in {region}. Return the features as a list.",
        feature_extraction_task(item)
    )
}

pub fn dedup_cluster_prompt(raw_features: &[String], clusters: usize) -> String {
    format!(
        "I have a list of features: {}. First, remove duplicated items, including features semantically similar. Then cluster these features based on the type of feature. Aim to produce {clusters} clusters.",
        raw_features.join(", ")
    )
}

pub fn formatting_prompt(categories: &str) -> String {
    format!(
        "Given this list {categories}, first clean the list to contain text only, then produce a python array, each subarray for each category."
    )
}

/// Clustering prompt for building age; `rows` are "id, year" lines.
pub fn age_clustering_prompt(rows: &[String]) -> String {
    format!(
        "You are a surveyor. You are given this list of buildings, each row is a building with their id and the year they are built. First group the buildings by 3 eras to ensure good coverage representative of the architectural style and dataset, then return the ids of buildings per era in an array.\n{}",
        rows.join("\n")
    )
}
