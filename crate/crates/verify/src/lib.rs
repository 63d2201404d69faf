//! Acceptance checks for the workspace. Everything lives in `tests/acceptance.rs`;
//! it prints one PASS/FAIL line per criterion and exits non-zero on any failure.
