use std::fmt::Display;

pub const INPUT: u8 = 2;
pub const INTERNAL: u8 = 1;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(msg: impl Display) -> Self {
        Failure { code: INPUT, error: anyhow::anyhow!("{msg}") }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Attaches an exit code and a context line to any error.
pub trait Classify<T> {
    fn input_err(self, ctx: impl Display) -> CmdResult<T>;
    fn internal_err(self, ctx: impl Display) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input_err(self, ctx: impl Display) -> CmdResult<T> {
        self.map_err(|e| Failure { code: INPUT, error: e.into().context(ctx.to_string()) })
    }

    fn internal_err(self, ctx: impl Display) -> CmdResult<T> {
        self.map_err(|e| Failure { code: INTERNAL, error: e.into().context(ctx.to_string()) })
    }
}
