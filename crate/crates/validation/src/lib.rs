//! Holds the `acceptance` integration test, which trains real models and
//! prints one `criterion N: PASS|FAIL` line per check.
