//! Event streams and their aggregation into time-binned volumes.
//!
//! Text format, one event per line: `t,x,y,p` with `t` in microseconds and
//! `p` in `{0, 1}` (0 is negative polarity). Lines starting with `#` are
//! comments; a `# H=<int> W=<int>` comment declares the sensor size.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numeric::Tensor;

/// Default aggregation window, in microseconds.
pub const DEFAULT_WINDOW_US: u64 = 40_000;
/// Default number of time bins.
pub const DEFAULT_BINS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Negative => -1.0,
            Polarity::Positive => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

/// `[t_start, t_end]` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: u64,
    pub end: u64,
}

impl TimeWindow {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        if end <= start {
            return invalid(format!("empty window: t_end {end} <= t_start {start}"));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, t: u64) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Half-open bin index with the right edge clamped into the last bin.
    pub fn bin(&self, t: u64, bins: usize) -> usize {
        let offset = (t - self.start) as u128 * bins as u128 / self.len() as u128;
        (offset as usize).min(bins - 1)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulation {
    /// Every event adds one to its cell.
    #[default]
    Count,
    /// Events add their polarity sign.
    Signed,
}

/// `H × W × B` volume of per-bin event counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EventVolume {
    pub grid: Tensor,
    pub window: TimeWindow,
    pub bins: usize,
}

impl EventVolume {
    pub fn height(&self) -> usize {
        self.grid.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.dims()[1]
    }

    pub fn get(&self, y: usize, x: usize, bin: usize) -> f64 {
        self.grid.data()[(y * self.width() + x) * self.bins + bin]
    }
}

/// Counts the events of `stream` falling inside `window` into an `H × W × B` grid.
///
/// Events outside the window are skipped.
pub fn voxelize(
    stream: &[Event],
    window: TimeWindow,
    height: usize,
    width: usize,
    bins: usize,
) -> Result<EventVolume> {
    voxelize_with(stream, window, height, width, bins, Accumulation::Count)
}

pub fn voxelize_with(
    stream: &[Event],
    window: TimeWindow,
    height: usize,
    width: usize,
    bins: usize,
    mode: Accumulation,
) -> Result<EventVolume> {
    let window = TimeWindow::new(window.start, window.end)?;
    if bins == 0 || height == 0 || width == 0 {
        return invalid("voxelize needs positive H, W and bin count");
    }
    let mut grid = Tensor::zeros(&[height, width, bins]);
    let data = grid.data_mut();
    for e in stream.iter().filter(|e| window.contains(e.t)) {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= width || y >= height {
            return invalid(format!("event at ({x},{y}) outside {height}x{width} sensor"));
        }
        let idx = (y * width + x) * bins + window.bin(e.t, bins);
        data[idx] += match mode {
            Accumulation::Count => 1.0,
            Accumulation::Signed => e.p.sign(),
        };
    }
    Ok(EventVolume { grid, window, bins })
}

/// Divides every channel by its maximum absolute value; all-zero channels stay zero.
pub fn normalize_volume(v: &EventVolume) -> EventVolume {
    let bins = v.bins;
    let mut max = vec![0.0f64; bins];
    for cell in v.grid.data().chunks(bins) {
        for (m, c) in max.iter_mut().zip(cell) {
            *m = m.max(c.abs());
        }
    }
    let mut grid = v.grid.clone();
    for cell in grid.data_mut().chunks_mut(bins) {
        for (c, m) in cell.iter_mut().zip(&max) {
            if *m > 0.0 {
                *c /= m;
            }
        }
    }
    EventVolume {
        grid,
        window: v.window,
        bins,
    }
}

/// Parsed event file.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFile {
    pub events: Vec<Event>,
    /// `(H, W)` from the header comment, when present.
    pub sensor: Option<(usize, usize)>,
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_events(&text, path)
}

/// Parses the text event format. `origin` is only used in error messages.
pub fn parse_events(text: &str, origin: &Path) -> Result<EventFile> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut sensor = None;
    let mut events = Vec::new();
    let mut last_t = 0u64;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(hw) = parse_sensor_header(comment) {
                sensor = Some(hw);
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(line_no, format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| err(line_no, format!("bad {what} `{s}`")))
        };
        let t = num(fields[0], "timestamp")?;
        let x = num(fields[1], "x")?;
        let y = num(fields[2], "y")?;
        let p = match fields[3] {
            "0" => Polarity::Negative,
            "1" => Polarity::Positive,
            other => return Err(err(line_no, format!("polarity must be 0 or 1, got `{other}`"))),
        };
        if t < last_t {
            return Err(err(line_no, format!("timestamp {t} decreases (previous {last_t})")));
        }
        if let Some((h, w)) = sensor {
            if x as usize >= w || y as usize >= h {
                return Err(err(line_no, format!("({x},{y}) outside {h}x{w} sensor")));
            }
        }
        let (x, y) = match (u32::try_from(x), u32::try_from(y)) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(err(line_no, "coordinate out of range".into())),
        };
        last_t = t;
        events.push(Event { t, x, y, p });
    }
    Ok(EventFile { events, sensor })
}

fn parse_sensor_header(comment: &str) -> Option<(usize, usize)> {
    let mut h = None;
    let mut w = None;
    for tok in comment.split_whitespace() {
        if let Some(v) = tok.strip_prefix("H=") {
            h = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("W=") {
            w = v.parse().ok();
        }
    }
    Some((h?, w?))
}

pub fn format_events(events: &[Event], sensor: Option<(usize, usize)>) -> String {
    let mut out = String::new();
    if let Some((h, w)) = sensor {
        let _ = writeln!(out, "# H={h} W={w}");
    }
    for e in events {
        let p = match e.p {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        };
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, p);
    }
    out
}

pub fn write_events(path: impl AsRef<Path>, events: &[Event], sensor: Option<(usize, usize)>) -> Result<()> {
    std::fs::write(path, format_events(events, sensor))?;
    Ok(())
}
