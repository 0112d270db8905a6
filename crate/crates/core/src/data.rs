//! Bundled default data files. Each can be replaced at runtime with a file of
//! the same schema.

pub const LADDER_TEMPLATES: &str = include_str!("../data/ladder_templates.json");
pub const PROMPTS: &str = include_str!("../data/prompts.json");
pub const LEXICON: &str = include_str!("../data/lexicon.json");
pub const CRISIS_RESOURCES: &str = include_str!("../data/crisis_resources.json");
pub const CRISIS_FIXTURES: &str = include_str!("../data/crisis_fixtures.json");
pub const MARCUS_SCRIPT: &str = include_str!("../data/scripts/marcus.json");
pub const CRISIS_PRONE_SCRIPT: &str = include_str!("../data/scripts/crisis_prone.json");
pub const PLATEAU_SCRIPT: &str = include_str!("../data/scripts/plateau.json");
