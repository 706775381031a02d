use std::fmt;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or config values: exit 2.
    Usage(anyhow::Error),
    /// Reading or writing a file failed: exit 3.
    Io(anyhow::Error),
    /// Inputs disagree with each other (checkpoint vs library, context
    /// length, family): exit 4.
    Mismatch(anyhow::Error),
    /// Anything else: exit 1.
    Other(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Mismatch(_) => 4,
            Failure::Other(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, e) = match self {
            Failure::Usage(e) => ("invalid arguments", e),
            Failure::Io(e) => ("i/o error", e),
            Failure::Mismatch(e) => ("input mismatch", e),
            Failure::Other(e) => ("error", e),
        };
        write!(f, "{kind}: {e:#}")
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

pub fn usage(msg: impl fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

pub fn mismatch(msg: impl fmt::Display) -> Failure {
    Failure::Mismatch(anyhow::anyhow!("{msg}"))
}

/// Tag an error with the exit class it belongs to.
pub trait Classify<T> {
    fn io(self, what: impl fmt::Display) -> Result<T>;
    fn usage(self, what: impl fmt::Display) -> Result<T>;
    fn other(self, what: impl fmt::Display) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn io(self, what: impl fmt::Display) -> Result<T> {
        self.map_err(|e| Failure::Io(e.into().context(what.to_string())))
    }

    fn usage(self, what: impl fmt::Display) -> Result<T> {
        self.map_err(|e| Failure::Usage(e.into().context(what.to_string())))
    }

    fn other(self, what: impl fmt::Display) -> Result<T> {
        self.map_err(|e| Failure::Other(e.into().context(what.to_string())))
    }
}
