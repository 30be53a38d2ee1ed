//! Rating triplet files, prediction metrics and report output.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{singular_values, top_svd, Mat};
use crate::model::MaskedData;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delimiter {
    Tab,
    Comma,
}

impl Delimiter {
    fn as_char(self) -> char {
        match self {
            Delimiter::Tab => '\t',
            Delimiter::Comma => ',',
        }
    }
}

/// Ratings with 1-based user and item ids; n1 and n2 are the largest ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingsTriplets {
    pub rows: Vec<Triplet>,
    pub n1: usize,
    pub n2: usize,
}

impl RatingsTriplets {
    pub fn new(rows: Vec<Triplet>) -> Result<Self> {
        let mut seen: HashMap<(usize, usize), usize> = HashMap::with_capacity(rows.len());
        let mut dups = Vec::new();
        for (k, t) in rows.iter().enumerate() {
            if t.user == 0 || t.item == 0 {
                return Err(Error::InvalidInput(format!("ids are 1-based; row {} has ({}, {})", k + 1, t.user, t.item)));
            }
            if !t.rating.is_finite() {
                return Err(Error::InvalidInput(format!("rating on row {} is not finite", k + 1)));
            }
            if let Some(first) = seen.insert((t.user, t.item), k) {
                dups.push(format!("({}, {}) on rows {} and {}", t.user, t.item, first + 1, k + 1));
            }
        }
        if !dups.is_empty() {
            let more = if dups.len() > 10 {
                format!(" and {} more", dups.len() - 10)
            } else {
                String::new()
            };
            dups.truncate(10);
            return Err(Error::Duplicates(format!("{}{more}", dups.join(", "))));
        }
        let n1 = rows.iter().map(|t| t.user).max().unwrap_or(0);
        let n2 = rows.iter().map(|t| t.item).max().unwrap_or(0);
        Ok(RatingsTriplets { rows, n1, n2 })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Observed-data matrix with w = 1 at rated cells. `dims` overrides the
    /// inferred size (for a test file read against training dimensions).
    pub fn to_masked(&self, dims: Option<(usize, usize)>) -> Result<MaskedData> {
        let (n1, n2) = dims.unwrap_or((self.n1, self.n2));
        let mut x = Mat::from_element(n1, n2, f64::NAN);
        let mut w = Mat::zeros(n1, n2);
        for t in &self.rows {
            check_cell(t, n1, n2)?;
            x[(t.user - 1, t.item - 1)] = t.rating;
            w[(t.user - 1, t.item - 1)] = 1.0;
        }
        MaskedData::new(x, w)
    }
}

fn check_cell(t: &Triplet, n1: usize, n2: usize) -> Result<()> {
    if t.user > n1 || t.item > n2 {
        return Err(Error::OutOfRange(format!(
            "cell ({}, {}) outside a {n1}x{n2} matrix",
            t.user, t.item
        )));
    }
    Ok(())
}

fn detect(line: &str) -> Delimiter {
    if line.contains('\t') {
        Delimiter::Tab
    } else {
        Delimiter::Comma
    }
}

/// Parse triplets from text. With `delim = None` the delimiter is taken from
/// the first data line (tab if present, else comma). Blank lines are skipped.
pub fn parse_triplets<R: BufRead>(reader: R, delim: Option<Delimiter>) -> Result<RatingsTriplets> {
    let mut rows = Vec::new();
    let mut d = delim;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let body = line.trim_end_matches(['\r', '\n']);
        if body.trim().is_empty() {
            continue;
        }
        let dl = *d.get_or_insert_with(|| detect(body));
        let fields: Vec<&str> = body.split(dl.as_char()).map(str::trim).collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 or 4 fields, found {}", fields.len()),
            });
        }
        let id = |s: &str, what: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(Error::Parse {
                    line: lineno,
                    msg: format!("{what} id {s:?} is not an integer >= 1"),
                }),
            }
        };
        let user = id(fields[0], "user")?;
        let item = id(fields[1], "item")?;
        let rating = match fields[2].parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("rating {:?} is not a finite number", fields[2]),
                })
            }
        };
        let timestamp = match fields.get(3) {
            Some(s) => Some(s.parse::<i64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("timestamp {s:?} is not an integer"),
            })?),
            None => None,
        };
        rows.push(Triplet {
            user,
            item,
            rating,
            timestamp,
        });
    }
    RatingsTriplets::new(rows)
}

pub fn load_triplets(path: &Path, delim: Option<Delimiter>) -> Result<RatingsTriplets> {
    let f = std::fs::File::open(path)?;
    parse_triplets(BufReader::new(f), delim)
}

pub fn save_triplets(path: &Path, t: &RatingsTriplets, delim: Delimiter) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let c = delim.as_char();
    for r in &t.rows {
        // `{}` on f64 prints the shortest string that parses back exactly
        match r.timestamp {
            Some(ts) => writeln!(out, "{}{c}{}{c}{}{c}{ts}", r.user, r.item, r.rating)?,
            None => writeln!(out, "{}{c}{}{c}{}", r.user, r.item, r.rating)?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Dense matrix as comma-separated text with a header row of 1-based column ids.
pub fn write_dense_csv(path: &Path, m: &Mat) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (1..=m.ncols()).map(|j| j.to_string()).collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Read a matrix written by [`write_dense_csv`].
pub fn read_dense_csv(path: &Path) -> Result<Mat> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::Parse { line: 1, msg: "missing header row".into() }),
    };
    let n2 = header.split(',').filter(|s| !s.trim().is_empty()).count();
    let mut vals = Vec::new();
    let mut n1 = 0;
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != n2 {
            return Err(Error::Parse {
                line: k + 2,
                msg: format!("expected {n2} values, found {}", row.len()),
            });
        }
        for v in row {
            vals.push(v.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: k + 2,
                msg: format!("{v:?} is not a number"),
            })?);
        }
        n1 += 1;
    }
    Ok(Mat::from_row_slice(n1, n2, &vals))
}

/// Entrywise clamp to [lo, hi].
pub fn predict_clipped(m_hat: &Mat, lo: f64, hi: f64) -> Result<Mat> {
    if !(lo <= hi) {
        return Err(Error::InvalidInput(format!("clip bounds reversed: {lo} > {hi}")));
    }
    Ok(m_hat.map(|v| v.clamp(lo, hi)))
}

/// Mean squared prediction error over the test cells.
pub fn mspe(test: &RatingsTriplets, m_pre: &Mat) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let (n1, n2) = m_pre.shape();
    let mut s = 0.0;
    for t in &test.rows {
        check_cell(t, n1, n2)?;
        s += (t.rating - m_pre[(t.user - 1, t.item - 1)]).powi(2);
    }
    Ok(s / test.len() as f64)
}

/// Rating-weighted mean percentile rank of test items within each user's
/// test set; 0 is the best-predicted item. An item's rank counts strictly
/// better predictions plus half the ties, over (items - 1). Users with a
/// single test item contribute rank 0.
pub fn percentile_rank_bar(test: &RatingsTriplets, m_pre: &Mat) -> Result<f64> {
    let (n1, n2) = m_pre.shape();
    let mut by_user: HashMap<usize, Vec<(f64, f64)>> = HashMap::new();
    for t in &test.rows {
        check_cell(t, n1, n2)?;
        by_user
            .entry(t.user)
            .or_default()
            .push((t.rating, m_pre[(t.user - 1, t.item - 1)]));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for items in by_user.values() {
        let c = items.len();
        for &(r, p) in items {
            let rank = if c == 1 {
                0.0
            } else {
                let better = items.iter().filter(|&&(_, q)| q > p).count() as f64;
                let ties = items.iter().filter(|&&(_, q)| q == p).count() as f64 - 1.0;
                (better + 0.5 * ties) / (c - 1) as f64
            };
            num += r * rank;
            den += r;
        }
    }
    if den == 0.0 {
        return Err(Error::InvalidInput("test ratings sum to zero".into()));
    }
    Ok(num / den)
}

fn check_orthonormal(v: &Mat, which: &str) -> Result<()> {
    let g = v.tr_mul(v);
    let d = (g - Mat::identity(v.ncols(), v.ncols())).amax();
    if d > 1e-8 {
        return Err(Error::InvalidInput(format!("{which} columns not orthonormal (deviation {d:.2e})")));
    }
    Ok(())
}

/// sqrt((1/k) sum_{i <= k} (1 - s_i^2)) with s_i the descending singular
/// values of v1^T v2.
pub fn subspace_distance(v1: &Mat, v2: &Mat, k: usize) -> Result<f64> {
    if v1.nrows() != v2.nrows() {
        return Err(Error::Dimension {
            block: "v2",
            expected: format!("{} rows", v1.nrows()),
            got: format!("{} rows", v2.nrows()),
        });
    }
    if !(k >= 1 && k <= v1.ncols() && v1.ncols() <= v2.ncols()) {
        return Err(Error::InvalidInput(format!(
            "need 1 <= k <= d1 <= d2, got k={k}, d1={}, d2={}",
            v1.ncols(),
            v2.ncols()
        )));
    }
    check_orthonormal(v1, "v1")?;
    check_orthonormal(v2, "v2")?;
    let s = singular_values(&v1.tr_mul(v2));
    let sum: f64 = s.iter().take(k).map(|x| 1.0 - x.min(1.0).powi(2)).sum();
    Ok((sum / k as f64).max(0.0).sqrt())
}

/// Orthonormal basis of the leading `d`-dimensional row space.
pub fn row_space(m: &Mat, d: usize) -> Mat {
    top_svd(m, d, None).v
}

/// Report with a free-text part and a key=value block.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub text: Vec<String>,
    pub pairs: Vec<(String, String)>,
}

impl Report {
    pub fn line(&mut self, s: impl Into<String>) {
        self.text.push(s.into());
    }

    pub fn kv(&mut self, k: &str, v: impl ToString) {
        self.pairs.push((k.to_string(), v.to_string()));
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.pairs.iter().find(|(a, _)| a == k).map(|(_, b)| b.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.text {
            let _ = writeln!(s, "{l}");
        }
        let _ = writeln!(s, "[result]");
        for (k, v) in &self.pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
