//! Control System Security Application: policy resolution, enforcement, key
//! management, alerting and audit logging.

pub mod alerts;
mod app;
pub mod audit;
pub mod enforce;
pub mod keys;
pub mod policy;
pub mod resolve;

pub use alerts::{Alert, AlertBook, AlertState};
pub use app::{CssaApp, CssaConfig};
pub use audit::{AuditDirection, AuditLog, AuditRecord};
pub use enforce::{enforce, EnforcementFailure, Obligation, Priorities};
pub use keys::KeyManager;
pub use policy::{check_policies, load_policies, load_policies_into, PolicyAction, PolicyError, PolicySet, PolicySummary, SecurityPolicy};
pub use resolve::{resolve, PolicyDecision, ResolveCtx};
