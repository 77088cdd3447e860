//! Line-oriented logger: `<ISO-8601 timestamp> <LEVEL> <message>`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use log::{Level, LevelFilter, Log, Metadata, Record};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LogLevel {
    Trace,
    Debug,
    #[default]
    Info,
}

impl LogLevel {
    pub fn filter(self) -> LevelFilter {
        match self {
            LogLevel::Trace => LevelFilter::Trace,
            LogLevel::Debug => LevelFilter::Debug,
            LogLevel::Info => LevelFilter::Info,
        }
    }
}

impl std::str::FromStr for LogLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TRACE" => Ok(LogLevel::Trace),
            "DEBUG" => Ok(LogLevel::Debug),
            "INFO" => Ok(LogLevel::Info),
            _ => Err(Error::InvalidArgument(format!(
                "log level must be TRACE, DEBUG or INFO, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LogConfig {
    pub level: LogLevel,
    /// Records go to stderr when unset.
    pub file_path: Option<PathBuf>,
}

enum Sink {
    Stderr,
    File(Mutex<File>),
    #[cfg(test)]
    Memory(Mutex<Vec<String>>),
}

pub struct LineLogger {
    level: LevelFilter,
    sink: Sink,
}

pub fn format_record(level: Level, message: &str) -> String {
    let ts = chrono::Local::now().format("%Y-%m-%dT%H:%M:%S%.3f%:z");
    format!("{ts} {level} {message}")
}

impl LineLogger {
    pub fn new(cfg: &LogConfig) -> Result<Self> {
        let sink = match &cfg.file_path {
            Some(p) => {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Sink::File(Mutex::new(f))
            }
            None => Sink::Stderr,
        };
        Ok(LineLogger {
            level: cfg.level.filter(),
            sink,
        })
    }
}

impl Log for LineLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = format_record(record.level(), &record.args().to_string());
        match &self.sink {
            Sink::Stderr => eprintln!("{line}"),
            Sink::File(f) => {
                if let Ok(mut f) = f.lock() {
                    let _ = writeln!(f, "{line}");
                }
            }
            #[cfg(test)]
            Sink::Memory(m) => m.lock().unwrap().push(line),
        }
    }

    fn flush(&self) {
        if let Sink::File(f) = &self.sink {
            if let Ok(mut f) = f.lock() {
                let _ = f.flush();
            }
        }
    }
}

/// Installs the process-wide logger. Fails if one is already installed.
pub fn configure_logging(cfg: &LogConfig) -> Result<()> {
    let logger = LineLogger::new(cfg)?;
    log::set_boxed_logger(Box::new(logger))
        .map_err(|e| Error::InvalidArgument(format!("logger already configured: {e}")))?;
    log::set_max_level(cfg.level.filter());
    Ok(())
}
