//! Stderr logger that can additionally copy records into a run directory.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use log::{Level, LevelFilter, Log, Metadata, Record};

struct Logger {
    level: LevelFilter,
    file: Mutex<Option<File>>,
}

static LOGGER: std::sync::OnceLock<Logger> = std::sync::OnceLock::new();

impl Log for Logger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = format!("[{:<5} {}] {}", record.level(), record.target(), record.args());
        eprintln!("{line}");
        if let Some(f) = self.file.lock().expect("log file lock").as_mut() {
            let _ = writeln!(f, "{line}");
        }
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().expect("log file lock").as_mut() {
            let _ = f.flush();
        }
    }
}

pub fn init(verbosity: u8) {
    let level = match verbosity {
        0 => LevelFilter::Info,
        1 => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    let logger = LOGGER.get_or_init(|| Logger { level, file: Mutex::new(None) });
    if log::set_logger(logger).is_ok() {
        log::set_max_level(level);
    }
}

/// Mirror all further records into `path`.
pub fn attach_file(path: &Path) -> std::io::Result<()> {
    let f = File::create(path)?;
    if let Some(l) = LOGGER.get() {
        *l.file.lock().expect("log file lock") = Some(f);
    }
    log::log!(Level::Debug, "logging to {}", path.display());
    Ok(())
}
