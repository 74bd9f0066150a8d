//! Line-delimited JSON logs on stderr.

use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::{json, Value};

struct JsonLogger;

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn emit(line: Value) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &Record) {
        if self.enabled(record.metadata()) {
            emit(json!({
                "ts": now(),
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            }));
        }
    }

    fn flush(&self) {}
}

static LOGGER: JsonLogger = JsonLogger;

pub fn init(level: LevelFilter) {
    // a second init in the same process keeps the first logger
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(level);
}

/// Structured event with a JSON payload, subject to the level filter.
pub fn event(level: Level, name: &str, payload: Value) {
    if level <= log::max_level() {
        emit(json!({
            "ts": now(),
            "level": level.as_str(),
            "event": name,
            "data": payload,
        }));
    }
}
