//! The two benchmark domains.

pub mod gaussclass;
pub mod nav2d;

/// Which initial-state distribution to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Test,
    All,
}
