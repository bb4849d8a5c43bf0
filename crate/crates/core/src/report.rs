//! Summary tables, CSV files and graymap image grids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::EvalRecord;
use crate::stats::{paired_test, Metric, PairedTest, MIN_PAIRS};
use crate::tensor::Tensor;

pub const RECORDS_HEADER: &str = "sample_id,R,setup,ssim,psnr,nmse";
pub const SUMMARY_HEADER: &str =
    "setup,R,n,ssim_mean,ssim_std,psnr_mean,psnr_std,nmse_mean,nmse_std,best";

pub const COMPARISONS_HEADER: &str = "a,b,R,metric,n,mean_diff,t,t_p,w_plus,w_minus,w_p";

/// Rows excluded from best-of marking: setups trained on target ground
/// truth, and the zero-filled baseline.
pub const REFERENCE_SETUPS: [&str; 3] = ["sl", "sl-all", "zf"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> MeanStd {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub setup: String,
    pub r: u32,
    pub n: usize,
    pub ssim: MeanStd,
    pub psnr: MeanStd,
    pub nmse: MeanStd,
    /// Metrics for which this row is the best non-reference setup at its R.
    pub best: Vec<&'static str>,
}

fn setup_rank(name: &str) -> usize {
    const ORDER: [&str; 6] = ["ssl", "ssl-all", "sl", "sl-all", "sl-proxy", "jssl"];
    ORDER.iter().position(|s| *s == name).unwrap_or(ORDER.len())
}

/// Rows ordered by setup (canonical order first), then acceleration.
pub fn summarize(records: &[EvalRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::invalid("no records to summarize"));
    }
    let mut groups: BTreeMap<(usize, String, u32), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((setup_rank(&r.setup), r.setup.clone(), r.r))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((_, setup, r), g)| {
            let col =
                |f: fn(&EvalRecord) -> f64| mean_std(&g.iter().map(|x| f(x)).collect::<Vec<_>>());
            SummaryRow {
                setup,
                r,
                n: g.len(),
                ssim: col(|x| x.ssim),
                psnr: col(|x| x.psnr),
                nmse: col(|x| x.nmse),
                best: Vec::new(),
            }
        })
        .collect();

    let accelerations: BTreeSet<u32> = rows.iter().map(|r| r.r).collect();
    type Metric = (&'static str, fn(&SummaryRow) -> f64, bool);
    let metrics: [Metric; 3] = [
        ("ssim", |r| r.ssim.mean, true),
        ("psnr", |r| r.psnr.mean, true),
        ("nmse", |r| r.nmse.mean, false),
    ];
    for acc in accelerations {
        for (name, get, higher) in metrics {
            let best = rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.r == acc && !REFERENCE_SETUPS.contains(&r.setup.as_str()))
                .max_by(|(_, a), (_, b)| {
                    let ord = get(a).total_cmp(&get(b));
                    if higher {
                        ord
                    } else {
                        ord.reverse()
                    }
                })
                .map(|(i, _)| i);
            if let Some(i) = best {
                rows[i].best.push(name);
            }
        }
    }
    Ok(rows)
}

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from(RECORDS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{:.8},{:.6},{:.8e}",
            r.sample_id, r.r, r.setup, r.ssim, r.psnr, r.nmse
        );
    }
    s
}

pub fn parse_records_csv(text: &str, origin: &Path) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RECORDS_HEADER) {
        return Err(Error::format(origin, "missing or unexpected header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::format(origin, format!("line {}: {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            Ok(EvalRecord {
                sample_id: f[0].to_string(),
                r: f[1].parse().map_err(|_| bad("bad acceleration"))?,
                setup: f[2].to_string(),
                ssim: num(f[3])?,
                psnr: num(f[4])?,
                nmse: num(f[5])?,
            })
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.4},{:.4},{:.6e},{:.6e},{}",
            r.setup,
            r.r,
            r.n,
            r.ssim.mean,
            r.ssim.std,
            r.psnr.mean,
            r.psnr.std,
            r.nmse.mean,
            r.nmse.std,
            r.best.join(";")
        );
    }
    s
}

/// Plain-text table; `*` marks the best non-reference setup.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<10} {:>3} {:>4}  {:<20} {:<20} {:<24}\n",
        "setup", "R", "n", "SSIM", "pSNR", "NMSE"
    );
    for r in rows {
        let mark = |m: &str| if r.best.contains(&m) { "*" } else { " " };
        let _ = writeln!(
            s,
            "{:<10} {:>3} {:>4}  {:<20} {:<20} {:<24}",
            r.setup,
            r.r,
            r.n,
            format!("{:.4}±{:.4}{}", r.ssim.mean, r.ssim.std, mark("ssim")),
            format!("{:.2}±{:.2}{}", r.psnr.mean, r.psnr.std, mark("psnr")),
            format!("{:.3e}±{:.1e}{}", r.nmse.mean, r.nmse.std, mark("nmse")),
        );
    }
    s
}

/// One paired comparison of setup `a` against `b` (differences `a − b`).
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub r: u32,
    pub metric: Metric,
    pub test: PairedTest,
}

/// Paired tests between every two setups at every R, for all three metrics.
/// The setup later in canonical order is `a`. Groups with fewer than
/// [`MIN_PAIRS`] records are skipped.
pub fn comparisons(records: &[EvalRecord]) -> Result<Vec<Comparison>> {
    let mut groups: BTreeMap<(usize, String), BTreeMap<u32, Vec<EvalRecord>>> = BTreeMap::new();
    for r in records {
        groups
            .entry((setup_rank(&r.setup), r.setup.clone()))
            .or_default()
            .entry(r.r)
            .or_default()
            .push(r.clone());
    }
    let setups: Vec<_> = groups.iter().collect();
    let mut out = Vec::new();
    for (j, (b_key, b_by_r)) in setups.iter().enumerate() {
        for (a_key, a_by_r) in &setups[j + 1..] {
            for (r, a) in a_by_r.iter() {
                let Some(b) = b_by_r.get(r) else { continue };
                if a.len() < MIN_PAIRS || b.len() < MIN_PAIRS {
                    continue;
                }
                for metric in [Metric::Ssim, Metric::Psnr, Metric::Nmse] {
                    out.push(Comparison {
                        a: a_key.1.clone(),
                        b: b_key.1.clone(),
                        r: *r,
                        metric,
                        test: paired_test(a, b, metric)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn comparisons_csv(rows: &[Comparison]) -> String {
    let mut s = String::from(COMPARISONS_HEADER);
    s.push('\n');
    for c in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6e},{:.6},{:.6e},{},{},{:.6e}",
            c.a,
            c.b,
            c.r,
            c.metric.name(),
            c.test.n,
            c.test.mean_diff,
            c.test.t.statistic,
            c.test.t.p_value,
            c.test.wilcoxon.w_plus,
            c.test.wilcoxon.w_minus,
            c.test.wilcoxon.p_value
        );
    }
    s
}

/// Binary 8-bit graymap of a 2-D image; `[0, max]` maps to `[0, 255]`.
pub fn pgm_bytes(image: &Tensor, max: f64) -> Result<Vec<u8>> {
    if image.ndim() != 2 {
        return Err(Error::shape("pgm", format!("{:?}", image.shape())));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v * scale).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor, max: f64) -> Result<()> {
    fs::write(path, pgm_bytes(image, max)?).map_err(|e| Error::io(path, e))
}

/// Tiles equally-sized images in rows with a one-pixel zero gutter.
pub fn tile(rows: &[Vec<Tensor>]) -> Result<Tensor> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::invalid("empty image grid"))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * (h + 1) - 1, ncol * (w + 1) - 1);
    let mut out = vec![0.0; gh * gw];
    for (i, row) in rows.iter().enumerate() {
        for (j, img) in row.iter().enumerate() {
            if img.shape() != [h, w] {
                return Err(Error::shape(
                    "tile",
                    format!("{:?} vs [{h}, {w}]", img.shape()),
                ));
            }
            for y in 0..h {
                let dst = (i * (h + 1) + y) * gw + j * (w + 1);
                out[dst..dst + w].copy_from_slice(&img.data()[y * w..(y + 1) * w]);
            }
        }
    }
    Tensor::new(vec![gh, gw], out)
}

/// Reconstructions of one test sample: its ground truth and one image per
/// (setup, R).
#[derive(Clone, Debug, Default)]
pub struct SampleImages {
    pub gt: Option<Tensor>,
    pub recons: BTreeMap<(String, u32), Tensor>,
}

/// One grid per sample: a row per R, ground truth then setups across.
pub fn write_grids(out_dir: &Path, images: &BTreeMap<String, SampleImages>) -> Result<Vec<String>> {
    let mut written = Vec::new();
    for (id, s) in images {
        let accs: BTreeSet<u32> = s.recons.keys().map(|k| k.1).collect();
        let mut setups: Vec<&String> = s
            .recons
            .keys()
            .map(|k| &k.0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        setups.sort_by_key(|n| (setup_rank(n), n.to_string()));
        let mut rows = Vec::new();
        for &r in &accs {
            let mut row: Vec<Tensor> = s.gt.iter().cloned().collect();
            for setup in &setups {
                match s.recons.get(&((*setup).clone(), r)) {
                    Some(t) => row.push(t.clone()),
                    None => {
                        return Err(Error::invalid(format!(
                            "missing reconstruction of {id} for {setup} at R={r}"
                        )))
                    }
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            continue;
        }
        let max = s.gt.as_ref().map_or_else(|| rows[0][0].max(), Tensor::max);
        let name = format!("grid_{id}.pgm");
        write_pgm(&out_dir.join(&name), &tile(&rows)?, max)?;
        written.push(name);
    }
    Ok(written)
}

/// Writes `records.csv`, `summary.csv`, `comparisons.csv` and the image grids into `out_dir`.
pub fn report(
    records: &[EvalRecord],
    images: &BTreeMap<String, SampleImages>,
    out_dir: &Path,
) -> Result<Vec<SummaryRow>> {
    let rows = summarize(records)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("records.csv", records_csv(records))?;
    write("summary.csv", summary_csv(&rows))?;
    write("comparisons.csv", comparisons_csv(&comparisons(records)?))?;
    write_grids(out_dir, images)?;
    Ok(rows)
}
