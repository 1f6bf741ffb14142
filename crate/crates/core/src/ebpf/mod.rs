//! eBPF subset: loader, assembler, verifier, interpreter and helpers.

pub mod asm;
pub mod helpers;
pub mod insn;
pub mod interp;
pub mod verifier;

pub use asm::{assemble, disassemble, AssembleError};
pub use helpers::{DatapathEnv, DetachedEnv, HelperSignature, HelperTable, Memory, Region, Trap};
pub use insn::{DecodeError, DecodeErrorKind, Insn, Op, Program, Section};
pub use interp::{execute, ExecOutcome, ExecutionContext};
pub use verifier::{verify, Limits, VerifiedProgram, VerifierError, VerifierErrorKind};
