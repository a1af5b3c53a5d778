//! Holds the `acceptance` test target, which runs end to end against both
//! `pfm_core` and `pfm_lab`. Kept in its own package so that it runs after
//! every other test binary in the workspace.
