use std::fmt::Display;

/// Command failure with its exit-code class.
#[derive(Debug)]
pub enum Failure {
    /// Bad input, configuration or schema (exit 1).
    Invalid(String),
    /// Failure while running a valid request (exit 2).
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> String {
        let m = match self {
            Failure::Invalid(m) | Failure::Runtime(m) => m,
        };
        m.replace('\n', " ")
    }

    pub fn invalid(m: impl Display) -> Self {
        Failure::Invalid(m.to_string())
    }

    pub fn runtime(m: impl Display) -> Self {
        Failure::Runtime(m.to_string())
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

fn core_is_runtime(e: &bline_core::Error) -> bool {
    matches!(e, bline_core::Error::Io(_))
}

impl From<bline_core::Error> for Failure {
    fn from(e: bline_core::Error) -> Self {
        if core_is_runtime(&e) {
            Failure::runtime(e)
        } else {
            Failure::invalid(e)
        }
    }
}

impl From<bline_models::Error> for Failure {
    fn from(e: bline_models::Error) -> Self {
        use bline_models::Error as E;
        match &e {
            E::Core(c) if core_is_runtime(c) => Failure::runtime(e),
            E::Diverged { .. } | E::Io(_) => Failure::runtime(e),
            _ => Failure::invalid(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::invalid(e)
    }
}

/// Attaches a context prefix to any error convertible to [`Failure`].
pub trait Context<T> {
    fn context(self, what: impl Display) -> CmdResult<T>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, what: impl Display) -> CmdResult<T> {
        self.map_err(|e| match e.into() {
            Failure::Invalid(m) => Failure::Invalid(format!("{what}: {m}")),
            Failure::Runtime(m) => Failure::Runtime(format!("{what}: {m}")),
        })
    }
}
