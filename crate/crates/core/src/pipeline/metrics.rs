//! Per-stage metrics CSV.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};

pub const HEADER: &str =
    "stage,iter,seconds,mean_reward,r_align,r_video,r_image,r_motion,kl,clip_frac,grad_norm,validity";

/// One line of the metrics file. Unset fields are written as empty cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub stage: String,
    pub iter: usize,
    pub seconds: Option<f64>,
    pub mean_reward: Option<f64>,
    /// alignment, video aesthetic, image aesthetic, motion
    pub components: [Option<f64>; 4],
    pub kl: Option<f64>,
    pub clip_frac: Option<f64>,
    pub grad_norm: Option<f64>,
    pub validity: Option<f64>,
}

impl MetricsRow {
    pub fn new(stage: &str, iter: usize) -> Self {
        Self {
            stage: stage.to_string(),
            iter,
            ..Self::default()
        }
    }

    pub fn with_components(mut self, c: [f64; 4]) -> Self {
        self.components = c.map(Some);
        self
    }

    fn cells(&self) -> [Option<f64>; 10] {
        let [a, v, i, m] = self.components;
        [
            self.seconds,
            self.mean_reward,
            a,
            v,
            i,
            m,
            self.kl,
            self.clip_frac,
            self.grad_norm,
            self.validity,
        ]
    }
}

/// Append-only log; iterations must not go backwards within a stage tag.
#[derive(Debug)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
    wall_clock: bool,
    start: Instant,
}

impl MetricsLog {
    /// With `wall_clock` off the seconds column stays empty, which keeps the
    /// file reproducible across runs.
    pub fn new(wall_clock: bool) -> Self {
        Self {
            rows: Vec::new(),
            wall_clock,
            start: Instant::now(),
        }
    }

    pub fn push(&mut self, mut row: MetricsRow) -> Result<()> {
        if let Some(prev) = self.rows.iter().rev().find(|r| r.stage == row.stage) {
            if row.iter < prev.iter {
                return Err(Error::Invalid(format!(
                    "metrics for {} went from iteration {} back to {}",
                    row.stage, prev.iter, row.iter
                )));
            }
        }
        row.seconds = if self.wall_clock {
            Some(self.start.elapsed().as_secs_f64())
        } else {
            None
        };
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.stage, r.iter);
            for c in r.cells() {
                s.push(',');
                if let Some(v) = c {
                    let _ = write!(s, "{v}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// A parsed CSV: header names plus rows of raw cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// 1-based source line of each row.
    pub lines: Vec<usize>,
}

impl CsvTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or(Error::Csv {
            line: 1,
            msg: "empty file".into(),
        })?;
        let header: Vec<String> = head.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        let mut numbers = Vec::new();
        for (i, l) in lines {
            let cells: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
            if cells.len() != header.len() {
                return Err(Error::Csv {
                    line: i + 1,
                    msg: format!("expected {} fields, found {}", header.len(), cells.len()),
                });
            }
            rows.push(cells);
            numbers.push(i + 1);
        }
        Ok(Self {
            header,
            rows,
            lines: numbers,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}
