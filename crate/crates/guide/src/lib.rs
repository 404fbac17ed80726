//! Probe build.
