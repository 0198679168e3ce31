//! Loss landscapes over digit distributions for a ground-truth digit.
//!
//! Everything here works on probability rows over the ten digits directly,
//! using the same per-position kernels as the logit-level losses.

use std::fmt::Write as _;

use thiserror::Error;

use crate::losses::{lp_row, LpVariant};

pub const FIG2_CSV_HEADER: &str = "p3,p5,loss_ce,loss_ntl_mse,loss_ntl_was";
pub const FIG1B_CSV_HEADER: &str = "q,token,distance,loss_ce,loss_ntl_mse,loss_ntl_was";
pub const DEFAULT_RESOLUTION: usize = 101;
pub const DEFAULT_QS: [f64; 3] = [0.5, 0.8, 0.95];
pub const LABEL_DIGIT: usize = 4;

/// Low, middle and high colours of the heatmap ramp.
const RAMP: [(u8, u8, u8); 3] = [(49, 54, 149), (255, 255, 191), (165, 0, 38)];

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("unknown figure {0:?}; expected 1b or 2")]
    UnknownFigure(String),
    #[error("grid resolution must be at least 2, got {0}")]
    Resolution(usize),
    #[error("q must lie in (0, 1), got {0}")]
    BadQ(f64),
    #[error("scan failed: {0}")]
    Scan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    NominalFlatness,
    Simplex,
}

impl std::str::FromStr for Figure {
    type Err = LandscapeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1b" => Ok(Figure::NominalFlatness),
            "2" => Ok(Figure::Simplex),
            _ => Err(LandscapeError::UnknownFigure(s.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigitLosses {
    pub ce: f64,
    pub mse: f64,
    pub was: f64,
}

/// CE, NTL-MSE and euclidean NTL-WAS of a digit distribution against
/// `label`.
pub fn digit_losses(probs: &[f64; 10], label: usize) -> DigitLosses {
    let values: Vec<f64> = (0..10).map(|d| d as f64).collect();
    let y = label as f64;
    let (mse, _) = lp_row(probs, &values, y, true, LpVariant::Mse);
    let was = probs.iter().zip(&values).map(|(p, v)| p * (v - y).abs()).sum();
    DigitLosses {
        ce: 0.0 - probs[label].ln(),
        mse,
        was,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexPoint {
    pub p3: f64,
    pub p5: f64,
    pub losses: DigitLosses,
}

/// Grid `p3 = i/(r-1)`, `p5 = j/(r-1)` with `i + j ≤ r-1`; the remaining
/// mass sits on the label digit 4.
pub fn simplex_grid(resolution: usize) -> Result<Vec<SimplexPoint>, LandscapeError> {
    if resolution < 2 {
        return Err(LandscapeError::Resolution(resolution));
    }
    let steps = (resolution - 1) as f64;
    let mut out = Vec::with_capacity(resolution * (resolution + 1) / 2);
    for i in 0..resolution {
        for j in 0..resolution - i {
            let (p3, p5) = (i as f64 / steps, j as f64 / steps);
            let mut probs = [0.0; 10];
            probs[3] = p3;
            probs[5] = p5;
            probs[LABEL_DIGIT] = ((resolution - 1 - i - j) as f64 / steps).max(0.0);
            out.push(SimplexPoint {
                p3,
                p5,
                losses: digit_losses(&probs, LABEL_DIGIT),
            });
        }
    }
    Ok(out)
}

pub fn simplex_csv(points: &[SimplexPoint]) -> String {
    let mut out = format!("{FIG2_CSV_HEADER}\n");
    for p in points {
        let l = p.losses;
        let _ = writeln!(out, "{},{},{},{},{}", p.p3, p.p5, l.ce, l.mse, l.was);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistancePoint {
    pub q: f64,
    pub token: usize,
    pub losses: DigitLosses,
}

/// Mass `q` on each wrong digit `t` in turn, `(1-q)/9` on the others.
pub fn distance_curves(qs: &[f64]) -> Result<Vec<DistancePoint>, LandscapeError> {
    let mut out = Vec::new();
    for &q in qs {
        if !(q > 0.0 && q < 1.0) {
            return Err(LandscapeError::BadQ(q));
        }
        for t in (0..10).filter(|&t| t != LABEL_DIGIT) {
            let mut probs = [(1.0 - q) / 9.0; 10];
            probs[t] = q;
            out.push(DistancePoint {
                q,
                token: t,
                losses: digit_losses(&probs, LABEL_DIGIT),
            });
        }
    }
    Ok(out)
}

pub fn distance_csv(points: &[DistancePoint]) -> String {
    let mut out = format!("{FIG1B_CSV_HEADER}\n");
    for p in points {
        let l = p.losses;
        let d = p.token.abs_diff(LABEL_DIGIT);
        let _ = writeln!(out, "{},{},{d},{},{},{}", p.q, p.token, l.ce, l.mse, l.was);
    }
    out
}

/// Which loss column a heatmap shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossColumn {
    Ce,
    Mse,
    Was,
}

impl LossColumn {
    pub const ALL: [LossColumn; 3] = [LossColumn::Ce, LossColumn::Mse, LossColumn::Was];

    pub fn name(&self) -> &'static str {
        match self {
            LossColumn::Ce => "loss_ce",
            LossColumn::Mse => "loss_ntl_mse",
            LossColumn::Was => "loss_ntl_was",
        }
    }

    fn pick(&self, l: &DigitLosses) -> f64 {
        match self {
            LossColumn::Ce => l.ce,
            LossColumn::Mse => l.mse,
            LossColumn::Was => l.was,
        }
    }
}

fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * 2.0;
    let (a, b, u) = if t <= 1.0 { (RAMP[0], RAMP[1], t) } else { (RAMP[1], RAMP[2], t - 1.0) };
    let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * u).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Rectangle-grid heatmap; p3 runs left to right, p5 bottom to top.
/// Infinite values take the top colour.
pub fn heatmap_svg(points: &[SimplexPoint], resolution: usize, column: LossColumn) -> String {
    const CELL: usize = 4;
    let size = resolution * CELL;
    let finite: Vec<f64> = points.iter().map(|p| column.pick(&p.losses)).filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <title>{name} over (p3, p5)</title>\n<rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n",
        w = size,
        h = size + 16,
        name = column.name()
    );
    let steps = (resolution - 1) as f64;
    for p in points {
        let i = (p.p3 * steps).round() as usize;
        let j = (p.p5 * steps).round() as usize;
        let v = column.pick(&p.losses);
        let t = if v.is_finite() { (v - lo) / span } else { 1.0 };
        let _ = writeln!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\"/>",
            i * CELL,
            (resolution - 1 - j) * CELL,
            ramp(t)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"2\" y=\"{}\" font-size=\"11\" font-family=\"monospace\">{} min {lo:.3} max {hi:.3}</text>\n</svg>",
        size + 12,
        column.name()
    );
    out
}

/// Summary of an automated pass over a simplex CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimplexScan {
    pub rows: usize,
    pub mse_zero_on_diagonal: bool,
    pub mse_positive_off_diagonal: bool,
    pub was_zero_only_at_origin: bool,
}

impl SimplexScan {
    pub fn passed(&self) -> bool {
        self.mse_zero_on_diagonal && self.mse_positive_off_diagonal && self.was_zero_only_at_origin
    }
}

/// Re-reads an emitted simplex CSV and checks where each NTL vanishes.
pub fn scan_simplex_csv(text: &str, resolution: usize) -> Result<SimplexScan, LandscapeError> {
    let mut lines = text.lines();
    if lines.next() != Some(FIG2_CSV_HEADER) {
        return Err(LandscapeError::Scan("header mismatch".into()));
    }
    let mut scan = SimplexScan {
        rows: 0,
        mse_zero_on_diagonal: true,
        mse_positive_off_diagonal: true,
        was_zero_only_at_origin: true,
    };
    for (n, line) in lines.enumerate() {
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| LandscapeError::Scan(format!("row {}: {e}", n + 2)))?;
        if cols.len() != 5 {
            return Err(LandscapeError::Scan(format!("row {} has {} columns", n + 2, cols.len())));
        }
        let (p3, p5, mse, was) = (cols[0], cols[1], cols[3], cols[4]);
        scan.rows += 1;
        if p3 == p5 {
            scan.mse_zero_on_diagonal &= mse == 0.0;
        } else {
            scan.mse_positive_off_diagonal &= mse > 0.0;
        }
        let origin = p3 == 0.0 && p5 == 0.0;
        scan.was_zero_only_at_origin &= (was == 0.0) == origin;
    }
    if scan.rows != resolution * (resolution + 1) / 2 {
        return Err(LandscapeError::Scan(format!(
            "{} rows, expected {} for resolution {resolution}",
            scan.rows,
            resolution * (resolution + 1) / 2
        )));
    }
    Ok(scan)
}
