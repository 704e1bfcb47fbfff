use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{load_pgm, save_pgm};
use crate::error::{Error, Result};
use crate::sampler::{BlockMask, MaskRecord, MaskSource, MaskStack};

pub const COVERAGE_FILE: &str = "coverage.csv";

fn mask_file(block: usize, step: usize) -> String {
    format!("mask_b{block}_t{step}.pgm")
}

/// Writes one PGM per (block, step) plus a coverage table.
pub fn save_masks(stack: &MaskStack, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("step,timestep,block,height,width,coverage,degenerate,source\n");
    for r in &stack.records {
        let m = &r.mask;
        let pixels: Vec<u8> = m.bits.iter().map(|&b| b * 255).collect();
        save_pgm(&pixels, m.width, m.height, &dir.join(mask_file(r.block, r.step)))?;
        let source = match r.source {
            MaskSource::Computed => "computed",
            MaskSource::Injected => "injected",
        };
        writeln!(
            csv,
            "{},{},{},{},{},{:.6},{},{source}",
            r.step,
            r.timestep,
            r.block,
            m.height,
            m.width,
            m.coverage(),
            m.degenerate
        )
        .expect("writing to a String");
    }
    let path = dir.join(COVERAGE_FILE);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// Reads back every mask listed in the coverage table of `dir`.
pub fn load_masks(dir: &Path) -> Result<MaskStack> {
    let path = dir.join(COVERAGE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("{}: malformed line {}", path.display(), i + 1));
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let (step, timestep, block) = (num(f[0])?, num(f[1])?, num(f[2])?);
        let (w, h, pixels) = load_pgm(&dir.join(mask_file(block, step)))?;
        if pixels.iter().any(|&p| p != 0 && p != 255) {
            return Err(Error::Format(format!("mask b{block} t{step} is not binary")));
        }
        records.push(MaskRecord {
            step,
            timestep,
            block,
            concept_indices: Vec::new(),
            source: MaskSource::Injected,
            mask: BlockMask {
                height: h,
                width: w,
                bits: pixels.iter().map(|&p| u8::from(p == 255)).collect(),
                degenerate: f[6] == "true",
            },
        });
    }
    Ok(MaskStack { records })
}
