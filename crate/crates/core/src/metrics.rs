//! Per-step training metrics and their CSV form.

use std::io::{self, Write};

pub const CSV_HEADER: &str = "step,loss_total,loss_con,loss_reg,lr,pos_count,skipped_images";

/// One optimizer step. For fine-tuning runs `loss_con` holds the
/// classification loss; for image-domain runs it holds the SimSiam loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_con: f64,
    pub loss_reg: f64,
    pub lr: f64,
    pub pos_count: usize,
    pub skipped_images: usize,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss_total, self.loss_con, self.loss_reg, self.lr, self.pos_count, self.skipped_images
        )
    }
}

/// Append-only CSV sink; writes the header on creation.
pub struct CsvWriter<W: Write> {
    out: W,
    rows: usize,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{CSV_HEADER}")?;
        Ok(Self { out, rows: 0 })
    }

    pub fn write(&mut self, m: &StepMetrics) -> io::Result<()> {
        self.rows += 1;
        writeln!(self.out, "{}", m.csv_row())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}
