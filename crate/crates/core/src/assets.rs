//! Prompt and skeleton text shipped with the crate.

pub const REWRITE_PROMPT: &str = include_str!("../assets/prompts/rewrite.txt");
pub const ZERO_SHOT_PROMPT: &str = include_str!("../assets/prompts/zero_shot.txt");

pub const MANAGER_SYSTEM: &str = include_str!("../assets/prompts/manager.txt");
pub const DESIGN_SYSTEM: &str = include_str!("../assets/prompts/design.txt");
pub const SEARCH_SYSTEM: &str = include_str!("../assets/prompts/search.txt");
pub const EVAL_SYSTEM: &str = include_str!("../assets/prompts/eval.txt");
pub const CODE_SYSTEM: &str = include_str!("../assets/prompts/code.txt");

pub const CLASSIFICATION_SKELETON: &str = include_str!("../assets/skeletons/classification.py");
pub const REGRESSION_SKELETON: &str = include_str!("../assets/skeletons/regression.py");

pub const DEVICES_JSON: &str = include_str!("../assets/devices.json");
pub const PRICES_JSON: &str = include_str!("../assets/prices.json");
