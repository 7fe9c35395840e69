//! Minimal stderr logger controlled by the `SWTT_LOG_LEVEL` environment
//! variable (`error`, `info`, or `debug`; default `info`).

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Error = 0,
    Info = 1,
    Debug = 2,
}

fn level() -> Level {
    static LEVEL: OnceLock<Level> = OnceLock::new();
    *LEVEL.get_or_init(|| match std::env::var("SWTT_LOG_LEVEL").as_deref() {
        Ok("error") => Level::Error,
        Ok("debug") => Level::Debug,
        _ => Level::Info,
    })
}

pub fn enabled(l: Level) -> bool {
    l <= level()
}

pub fn error(msg: impl AsRef<str>) {
    if enabled(Level::Error) {
        eprintln!("[error] {}", msg.as_ref());
    }
}

pub fn info(msg: impl AsRef<str>) {
    if enabled(Level::Info) {
        eprintln!("[info] {}", msg.as_ref());
    }
}

pub fn debug(msg: impl AsRef<str>) {
    if enabled(Level::Debug) {
        eprintln!("[debug] {}", msg.as_ref());
    }
}
