//! Framing, messages and the two party endpoints.

pub mod dap;
pub mod frame;
pub mod link;
pub mod message;
pub mod tcp;

pub use dap::{AuditKind, AuditRecord, DapConfig, DapService, DapSession};
pub use frame::{Direction, Frame, Transcript, TranscriptEntry, DEFAULT_MAX_FRAME};
pub use link::{collect_share, DapLink, LocalLink, Session, SessionStats, StreamLink};
pub use message::{Request, Response, Role, Token};
