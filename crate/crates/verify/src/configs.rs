//! The configs shipped in `configs/`, embedded at compile time.

use hyperseg::ModelConfig;

const SHIPPED: [(&str, &str); 6] = [
    ("tiny", include_str!("../../../configs/tiny.json")),
    (
        "hyperseg-l-pascal",
        include_str!("../../../configs/hyperseg-l-pascal.json"),
    ),
    (
        "hyperseg-m-cityscapes",
        include_str!("../../../configs/hyperseg-m-cityscapes.json"),
    ),
    (
        "hyperseg-s-cityscapes",
        include_str!("../../../configs/hyperseg-s-cityscapes.json"),
    ),
    (
        "hyperseg-s-camvid",
        include_str!("../../../configs/hyperseg-s-camvid.json"),
    ),
    (
        "hyperseg-l-camvid",
        include_str!("../../../configs/hyperseg-l-camvid.json"),
    ),
];

pub fn by_name(name: &str) -> Option<ModelConfig> {
    SHIPPED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ModelConfig::from_json(text).expect("shipped config parses"))
}

pub fn tiny() -> ModelConfig {
    by_name("tiny").unwrap()
}

/// The five scaled architecture configs (everything except `tiny`).
pub fn scaled() -> Vec<ModelConfig> {
    SHIPPED[1..]
        .iter()
        .map(|(n, _)| by_name(n).unwrap())
        .collect()
}

pub fn all() -> Vec<ModelConfig> {
    SHIPPED.iter().map(|(n, _)| by_name(n).unwrap()).collect()
}
