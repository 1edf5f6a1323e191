//! Attribute specs, templates and the opinion lexicon shipped with the crate.

use crate::fairness_spec::{templates_from_json_str, AttributeSpec, Template};
use crate::sentiment::Lexicon;

pub const COUNTRY_SPEC: &str = include_str!("../data/country.json");
pub const OCCUPATION_SPEC: &str = include_str!("../data/occupation.json");
pub const NAME_SPEC: &str = include_str!("../data/name.json");
pub const COUNTRY_TEMPLATES: &str = include_str!("../data/country_templates.json");
pub const OCCUPATION_TEMPLATES: &str = include_str!("../data/occupation_templates.json");
pub const NAME_TEMPLATES: &str = include_str!("../data/name_templates.json");
pub const POSITIVE_WORDS: &str = include_str!("../data/positive-words.txt");
pub const NEGATIVE_WORDS: &str = include_str!("../data/negative-words.txt");

pub fn country() -> AttributeSpec {
    AttributeSpec::from_json_str(COUNTRY_SPEC).expect("bundled country spec")
}

pub fn occupation() -> AttributeSpec {
    AttributeSpec::from_json_str(OCCUPATION_SPEC).expect("bundled occupation spec")
}

pub fn name() -> AttributeSpec {
    AttributeSpec::from_json_str(NAME_SPEC).expect("bundled name spec")
}

pub fn country_templates() -> Vec<Template> {
    templates_from_json_str(COUNTRY_TEMPLATES).expect("bundled country templates")
}

pub fn occupation_templates() -> Vec<Template> {
    templates_from_json_str(OCCUPATION_TEMPLATES).expect("bundled occupation templates")
}

pub fn name_templates() -> Vec<Template> {
    templates_from_json_str(NAME_TEMPLATES).expect("bundled name templates")
}

/// The three bundled attributes paired with their templates.
pub fn builtin_attributes() -> Vec<(AttributeSpec, Vec<Template>)> {
    vec![
        (country(), country_templates()),
        (occupation(), occupation_templates()),
        (name(), name_templates()),
    ]
}

/// The bundled opinion-word lexicon.
pub fn opinion_lexicon() -> Lexicon {
    Lexicon::from_word_lists(POSITIVE_WORDS, NEGATIVE_WORDS).expect("bundled lexicon")
}
