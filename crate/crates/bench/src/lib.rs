//! Placeholder library; the real content lives in `benches/`.
