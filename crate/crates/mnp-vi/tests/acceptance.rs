//! End-to-end acceptance suite (populated as the library lands).

fn main() {}
