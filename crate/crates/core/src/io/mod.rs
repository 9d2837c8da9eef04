//! File formats and configuration (placeholder).
