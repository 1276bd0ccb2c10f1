//! Shared helpers for the integration suites.

// Intentionally minimal for now; suites add helpers as they grow.
