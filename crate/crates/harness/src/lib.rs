//! Scenario runner, traffic generators and benchmarks.

pub mod bench;
pub mod config;
pub mod driver;
pub mod modbus;
pub mod presets;
pub mod report;
pub mod scenario;
pub mod traffic;

pub use config::{ConfigError, ScenarioConfig, ScenarioName};
pub use driver::{Driver, DriverOptions};
pub use report::MetricsReport;
pub use scenario::{run, Outcome, ScenarioError};
