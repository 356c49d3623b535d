use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Config,
    Dependency,
    Backend,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Dependency => 3,
            Kind::Backend => 4,
        }
    }
}

/// An error with a known exit status. Anything else that reaches `main`
/// exits with 1.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: Kind::Config, message: message.into() }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self { kind: Kind::Backend, message: message.into() }
    }

    /// A required artifact is missing; `producer` names the command that
    /// creates it.
    pub fn missing(artifact: &std::path::Path, producer: &str) -> Self {
        Self {
            kind: Kind::Dependency,
            message: format!("missing {}; run `gensynth {producer}` first", artifact.display()),
        }
    }

    pub fn dependency(message: impl Into<String>) -> Self {
        Self { kind: Kind::Dependency, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Failure>())
        .map_or(1, |f| f.kind.exit_code())
}
