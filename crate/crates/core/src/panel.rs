//! Dyadic panel data: representation, file ingestion, pair-regressor
//! composition, and time differencing.
//!
//! A panel holds, for every stored dyad `(i, j)` and period `t`, a selection
//! indicator `d`, an outcome `y` (present iff `d = 1`), and regressor
//! vectors `w` and `r`. Undirected panels store each dyad once with `i < j`;
//! directed panels store both orientations. Self-loops are rejected.
//!
//! Differencing produces one row per dyad and ordered period pair `s < t`
//! with both periods selected, using the convention Δ = value at `s` minus
//! value at `t` (earlier minus later).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag written into JSON panel caches.
pub const PANEL_SCHEMA_VERSION: u32 = 1;

/// A validated dyadic panel dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicPanel {
    n: usize,
    periods: usize,
    directed: bool,
    q_w: usize,
    q_r: usize,
    node_labels: Vec<String>,
    period_labels: Vec<String>,
    w_names: Vec<String>,
    r_names: Vec<String>,
    /// Stored dyads; `i < j` when undirected.
    pairs: Vec<(u32, u32)>,
    /// Selection indicators, indexed `dyad * periods + t`.
    d: Vec<bool>,
    /// Outcomes; `Some` iff selected.
    y: Vec<Option<f64>>,
    /// Row-major `w` blocks of length `q_w` per (dyad, period).
    w: Vec<f64>,
    /// Row-major `r` blocks of length `q_r` per (dyad, period).
    r: Vec<f64>,
}

impl DyadicPanel {
    /// Direct construction for generators that guarantee the invariants
    /// (dense pairs, `y` present iff `d`, rectangular periods).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts_unchecked(
        n: usize,
        periods: usize,
        directed: bool,
        q_w: usize,
        q_r: usize,
        node_labels: Vec<String>,
        period_labels: Vec<String>,
        w_names: Vec<String>,
        r_names: Vec<String>,
        pairs: Vec<(u32, u32)>,
        d: Vec<bool>,
        y: Vec<Option<f64>>,
        w: Vec<f64>,
        r: Vec<f64>,
    ) -> DyadicPanel {
        debug_assert_eq!(d.len(), pairs.len() * periods);
        debug_assert_eq!(w.len(), pairs.len() * periods * q_w);
        debug_assert_eq!(r.len(), pairs.len() * periods * q_r);
        DyadicPanel {
            n,
            periods,
            directed,
            q_w,
            q_r,
            node_labels,
            period_labels,
            w_names,
            r_names,
            pairs,
            d,
            y,
            w,
            r,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn period_count(&self) -> usize {
        self.periods
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn q_w(&self) -> usize {
        self.q_w
    }

    pub fn q_r(&self) -> usize {
        self.q_r
    }

    pub fn node_labels(&self) -> &[String] {
        &self.node_labels
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    pub fn w_names(&self) -> &[String] {
        &self.w_names
    }

    pub fn r_names(&self) -> &[String] {
        &self.r_names
    }

    /// Number of stored dyads (not the `N` normalization constant).
    pub fn stored_pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn d(&self, dyad: usize, t: usize) -> bool {
        self.d[dyad * self.periods + t]
    }

    pub fn y(&self, dyad: usize, t: usize) -> Option<f64> {
        self.y[dyad * self.periods + t]
    }

    pub fn w(&self, dyad: usize, t: usize) -> &[f64] {
        let e = dyad * self.periods + t;
        &self.w[e * self.q_w..(e + 1) * self.q_w]
    }

    pub fn r(&self, dyad: usize, t: usize) -> &[f64] {
        let e = dyad * self.periods + t;
        &self.r[e * self.q_r..(e + 1) * self.q_r]
    }

    /// Materialize both orientations of an undirected panel as a directed
    /// one. Used to cross-check that the directed code path reproduces
    /// undirected results (the double sum splits as
    /// `Σ_{i≠j} A_ij = Σ_{i<j} (A_ij + A_ji)`).
    pub fn to_directed(&self) -> DyadicPanel {
        if self.directed {
            return self.clone();
        }
        let mut pairs = Vec::with_capacity(2 * self.pairs.len());
        let mut d = Vec::with_capacity(2 * self.d.len());
        let mut y = Vec::with_capacity(2 * self.y.len());
        let mut w = Vec::with_capacity(2 * self.w.len());
        let mut r = Vec::with_capacity(2 * self.r.len());
        for (idx, &(i, j)) in self.pairs.iter().enumerate() {
            for &(a, b) in &[(i, j), (j, i)] {
                pairs.push((a, b));
                for t in 0..self.periods {
                    d.push(self.d(idx, t));
                    y.push(self.y(idx, t));
                    w.extend_from_slice(self.w(idx, t));
                    r.extend_from_slice(self.r(idx, t));
                }
            }
        }
        DyadicPanel {
            n: self.n,
            periods: self.periods,
            directed: true,
            q_w: self.q_w,
            q_r: self.q_r,
            node_labels: self.node_labels.clone(),
            period_labels: self.period_labels.clone(),
            w_names: self.w_names.clone(),
            r_names: self.r_names.clone(),
            pairs,
            d,
            y,
            w,
            r,
        }
    }

    /// Write the panel as CSV using the same schema the loader accepts.
    /// Floats are formatted with shortest round-trip representation, so
    /// save → load is exact for finite values.
    pub fn save_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["i".to_string(), "j".to_string(), "t".to_string(), "d".to_string(), "y".to_string()];
        header.extend(self.w_names.iter().cloned());
        header.extend(self.r_names.iter().cloned());
        wtr.write_record(&header)?;
        for (idx, &(i, j)) in self.pairs.iter().enumerate() {
            for t in 0..self.periods {
                let mut rec = vec![
                    self.node_labels[i as usize].clone(),
                    self.node_labels[j as usize].clone(),
                    self.period_labels[t].clone(),
                    if self.d(idx, t) { "1".to_string() } else { "0".to_string() },
                    self.y(idx, t).map(|v| v.to_string()).unwrap_or_default(),
                ];
                rec.extend(self.w(idx, t).iter().map(|v| v.to_string()));
                rec.extend(self.r(idx, t).iter().map(|v| v.to_string()));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.save_csv(file)
    }

    /// Serialize to versioned JSON for caching.
    pub fn save_json<W: Write>(&self, out: W) -> Result<()> {
        let envelope = PanelEnvelope { schema_version: PANEL_SCHEMA_VERSION, panel: self.clone() };
        serde_json::to_writer(out, &envelope)?;
        Ok(())
    }

    pub fn load_json<R: Read>(input: R) -> Result<DyadicPanel> {
        let envelope: PanelEnvelope = serde_json::from_reader(input)?;
        if envelope.schema_version != PANEL_SCHEMA_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported panel schema version {} (expected {})",
                envelope.schema_version, PANEL_SCHEMA_VERSION
            )));
        }
        Ok(envelope.panel)
    }
}

#[derive(Serialize, Deserialize)]
struct PanelEnvelope {
    schema_version: u32,
    panel: DyadicPanel,
}

/// Column mapping for CSV ingestion. `w_cols`/`r_cols`, when given, name the
/// regressor columns explicitly; otherwise columns are detected by prefix
/// with 1-based contiguous suffixes (`w_1, w_2, ...`).
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub i: String,
    pub j: String,
    pub t: String,
    pub d: String,
    pub y: String,
    pub w_prefix: String,
    pub r_prefix: String,
    pub w_cols: Option<Vec<String>>,
    pub r_cols: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            i: "i".into(),
            j: "j".into(),
            t: "t".into(),
            d: "d".into(),
            y: "y".into(),
            w_prefix: "w_".into(),
            r_prefix: "r_".into(),
            w_cols: None,
            r_cols: None,
        }
    }
}

/// Load a panel from CSV. Undirected inputs may carry both orientations of
/// a dyad; they are checked for symmetry and deduplicated.
pub fn load_panel<R: Read>(input: R, schema: &CsvSchema, directed: bool) -> Result<DyadicPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Invalid(format!("missing column '{name}'")))
    };
    let ci = col(&schema.i)?;
    let cj = col(&schema.j)?;
    let ct = col(&schema.t)?;
    let cd = col(&schema.d)?;
    let cy = col(&schema.y)?;

    let named_cols = |names: &[String]| -> Result<Vec<usize>> {
        names.iter().map(|n| col(n)).collect()
    };
    let prefixed_cols = |prefix: &str, what: &str| -> Result<(Vec<usize>, Vec<String>)> {
        let mut found: Vec<(usize, usize)> = Vec::new();
        for (pos, h) in headers.iter().enumerate() {
            if let Some(suffix) = h.strip_prefix(prefix) {
                if let Ok(k) = suffix.parse::<usize>() {
                    if k >= 1 {
                        found.push((k, pos));
                    }
                }
            }
        }
        found.sort_unstable();
        if found.is_empty() {
            return Err(Error::Invalid(format!("missing column '{prefix}1' ({what} regressors)")));
        }
        for (expected, &(k, _)) in found.iter().enumerate() {
            if k != expected + 1 {
                return Err(Error::Invalid(format!(
                    "{what} regressor columns with prefix '{prefix}' are not contiguous from 1"
                )));
            }
        }
        let names = found.iter().map(|&(k, _)| format!("{prefix}{k}")).collect();
        Ok((found.into_iter().map(|(_, pos)| pos).collect(), names))
    };

    let (w_idx, w_names) = match &schema.w_cols {
        Some(names) => (named_cols(names)?, names.clone()),
        None => prefixed_cols(&schema.w_prefix, "outcome-equation")?,
    };
    let (r_idx, r_names) = match &schema.r_cols {
        Some(names) => (named_cols(names)?, names.clone()),
        None => prefixed_cols(&schema.r_prefix, "selection-equation")?,
    };

    let mut builder = PanelBuilder::new(directed)
        .with_w_names(w_names)
        .with_r_names(r_names);
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let get = |pos: usize| -> &str { record.get(pos).unwrap_or("") };
        let parse_f64 = |pos: usize, what: &str| -> Result<f64> {
            get(pos).parse::<f64>().map_err(|_| {
                Error::Invalid(format!("row {}: cannot parse {} value '{}'", line + 2, what, get(pos)))
            })
        };
        let d = match get(cd) {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Invalid(format!(
                    "row {}: selection indicator must be 0 or 1, got '{other}'",
                    line + 2
                )))
            }
        };
        let y = if get(cy).is_empty() { None } else { Some(parse_f64(cy, "outcome")?) };
        let mut w = Vec::with_capacity(w_idx.len());
        for &pos in &w_idx {
            w.push(parse_f64(pos, "w")?);
        }
        let mut r = Vec::with_capacity(r_idx.len());
        for &pos in &r_idx {
            r.push(parse_f64(pos, "r")?);
        }
        builder.add_row(get(ci), get(cj), get(ct), d, y, &w, &r)?;
    }
    builder.finish()
}

pub fn load_panel_path<P: AsRef<Path>>(
    path: P,
    schema: &CsvSchema,
    directed: bool,
) -> Result<DyadicPanel> {
    let file = std::fs::File::open(path)?;
    load_panel(file, schema, directed)
}

struct RawRow {
    i: u32,
    j: u32,
    t: usize,
    d: bool,
    y: Option<f64>,
    w: Vec<f64>,
    r: Vec<f64>,
}

/// Incremental panel construction with validation at `finish`.
pub struct PanelBuilder {
    directed: bool,
    q_w: Option<usize>,
    q_r: Option<usize>,
    w_names: Option<Vec<String>>,
    r_names: Option<Vec<String>>,
    node_ids: HashMap<String, u32>,
    node_labels: Vec<String>,
    period_ids: HashMap<String, usize>,
    period_labels: Vec<String>,
    rows: Vec<RawRow>,
}

impl PanelBuilder {
    pub fn new(directed: bool) -> Self {
        PanelBuilder {
            directed,
            q_w: None,
            q_r: None,
            w_names: None,
            r_names: None,
            node_ids: HashMap::new(),
            node_labels: Vec::new(),
            period_ids: HashMap::new(),
            period_labels: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn with_w_names(mut self, names: Vec<String>) -> Self {
        self.w_names = Some(names);
        self
    }

    pub fn with_r_names(mut self, names: Vec<String>) -> Self {
        self.r_names = Some(names);
        self
    }

    fn node_id(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.node_ids.get(label) {
            return id;
        }
        let id = self.node_labels.len() as u32;
        self.node_ids.insert(label.to_string(), id);
        self.node_labels.push(label.to_string());
        id
    }

    fn period_id(&mut self, label: &str) -> usize {
        if let Some(&id) = self.period_ids.get(label) {
            return id;
        }
        let id = self.period_labels.len();
        self.period_ids.insert(label.to_string(), id);
        self.period_labels.push(label.to_string());
        id
    }

    /// Add one observation `(i, j, t)`. Labels are remapped to dense ids.
    pub fn add_row(
        &mut self,
        i: &str,
        j: &str,
        t: &str,
        d: bool,
        y: Option<f64>,
        w: &[f64],
        r: &[f64],
    ) -> Result<()> {
        if i == j {
            return Err(Error::Invalid(format!("self-loop ({i},{i},{t}) is not allowed")));
        }
        match (d, y) {
            (false, Some(_)) => {
                return Err(Error::Invalid(format!(
                    "outcome present for unselected dyad ({i},{j},{t})"
                )))
            }
            (true, None) => {
                return Err(Error::Invalid(format!(
                    "outcome missing for selected dyad ({i},{j},{t})"
                )))
            }
            _ => {}
        }
        if let Some(v) = y {
            if !v.is_finite() {
                return Err(Error::Invalid(format!("non-finite outcome at ({i},{j},{t})")));
            }
        }
        if w.iter().chain(r.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite regressor at ({i},{j},{t})")));
        }
        match self.q_w {
            None => self.q_w = Some(w.len()),
            Some(q) if q != w.len() => {
                return Err(Error::Invalid(format!(
                    "inconsistent w length at ({i},{j},{t}): expected {q}, got {}",
                    w.len()
                )))
            }
            _ => {}
        }
        match self.q_r {
            None => self.q_r = Some(r.len()),
            Some(q) if q != r.len() => {
                return Err(Error::Invalid(format!(
                    "inconsistent r length at ({i},{j},{t}): expected {q}, got {}",
                    r.len()
                )))
            }
            _ => {}
        }
        let ii = self.node_id(i);
        let jj = self.node_id(j);
        let tt = self.period_id(t);
        self.rows.push(RawRow { i: ii, j: jj, t: tt, d, y, w: w.to_vec(), r: r.to_vec() });
        Ok(())
    }

    pub fn finish(self) -> Result<DyadicPanel> {
        let PanelBuilder {
            directed,
            q_w,
            q_r,
            w_names,
            r_names,
            node_labels,
            mut period_labels,
            rows,
            ..
        } = self;
        if rows.is_empty() {
            return Err(Error::Invalid("panel has no rows".to_string()));
        }
        let q_w = q_w.unwrap_or(0);
        let q_r = q_r.unwrap_or(0);
        if q_w == 0 || q_r == 0 {
            return Err(Error::Invalid("panels need at least one w and one r regressor".to_string()));
        }

        // Periods are ordered numerically when every label parses as a
        // number, otherwise lexicographically; the differencing sign
        // convention depends on this order.
        let mut order: Vec<usize> = (0..period_labels.len()).collect();
        let numeric: Option<Vec<f64>> =
            period_labels.iter().map(|l| l.parse::<f64>().ok()).collect();
        match numeric {
            Some(vals) => order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap()),
            None => order.sort_by(|&a, &b| period_labels[a].cmp(&period_labels[b])),
        }
        let mut period_rank = vec![0usize; order.len()];
        for (rank, &old) in order.iter().enumerate() {
            period_rank[old] = rank;
        }
        period_labels = order.iter().map(|&old| period_labels[old].clone()).collect();
        let periods = period_labels.len();
        if periods < 2 {
            return Err(Error::Invalid(format!("panels need at least 2 periods, got {periods}")));
        }

        // Group observations by canonical dyad key.
        struct Slot {
            d: bool,
            y: Option<f64>,
            w: Vec<f64>,
            r: Vec<f64>,
            /// true when the stored orientation was (i, j) as keyed
            original: bool,
        }
        let mut slots: HashMap<(u32, u32), Vec<Option<Slot>>> = HashMap::new();
        let label = |id: u32| node_labels[id as usize].clone();
        for row in rows {
            let t = period_rank[row.t];
            let (key, original) = if directed || row.i < row.j {
                ((row.i, row.j), true)
            } else {
                ((row.j, row.i), false)
            };
            let entry = slots.entry(key).or_insert_with(|| {
                let mut v = Vec::with_capacity(periods);
                v.resize_with(periods, || None);
                v
            });
            match &entry[t] {
                None => {
                    entry[t] = Some(Slot { d: row.d, y: row.y, w: row.w, r: row.r, original });
                }
                Some(existing) => {
                    if existing.original == original {
                        return Err(Error::Invalid(format!(
                            "duplicate ({},{},{}) key",
                            label(row.i),
                            label(row.j),
                            period_labels[t]
                        )));
                    }
                    // Mirrored orientation of an undirected dyad: must agree.
                    let same = existing.d == row.d
                        && existing.y == row.y
                        && existing.w == row.w
                        && existing.r == row.r;
                    if !same {
                        return Err(Error::Invalid(format!(
                            "asymmetric undirected input at ({},{},{})",
                            label(row.i),
                            label(row.j),
                            period_labels[t]
                        )));
                    }
                }
            }
        }

        let mut pairs: Vec<(u32, u32)> = slots.keys().copied().collect();
        pairs.sort_unstable();
        let mut d = Vec::with_capacity(pairs.len() * periods);
        let mut y = Vec::with_capacity(pairs.len() * periods);
        let mut w = Vec::with_capacity(pairs.len() * periods * q_w);
        let mut r = Vec::with_capacity(pairs.len() * periods * q_r);
        for &pair in &pairs {
            let entry = &slots[&pair];
            for (t, slot) in entry.iter().enumerate() {
                match slot {
                    Some(s) => {
                        d.push(s.d);
                        y.push(s.y);
                        w.extend_from_slice(&s.w);
                        r.extend_from_slice(&s.r);
                    }
                    None => {
                        return Err(Error::Invalid(format!(
                            "dyad ({},{}) is missing period {}",
                            label(pair.0),
                            label(pair.1),
                            period_labels[t]
                        )))
                    }
                }
            }
        }

        let default_names = |prefix: &str, q: usize| -> Vec<String> {
            (1..=q).map(|k| format!("{prefix}{k}")).collect()
        };
        Ok(DyadicPanel {
            n: node_labels.len(),
            periods,
            directed,
            q_w,
            q_r,
            node_labels,
            period_labels,
            w_names: w_names.unwrap_or_else(|| default_names("w_", q_w)),
            r_names: r_names.unwrap_or_else(|| default_names("r_", q_r)),
            pairs,
            d,
            y,
            w,
            r,
        })
    }
}

/// Node-level observables: `x` feeds the outcome-equation pair rule, `z`
/// the selection-equation pair rule. Rectangular by construction.
#[derive(Debug, Clone)]
pub struct NodeTable {
    n: usize,
    periods: usize,
    q_x: usize,
    q_z: usize,
    x: Vec<f64>,
    z: Vec<f64>,
}

impl NodeTable {
    pub fn new(n: usize, periods: usize, q_x: usize, q_z: usize) -> Self {
        NodeTable {
            n,
            periods,
            q_x,
            q_z,
            x: vec![0.0; n * periods * q_x],
            z: vec![0.0; n * periods * q_z],
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn period_count(&self) -> usize {
        self.periods
    }

    pub fn set_x(&mut self, i: usize, t: usize, values: &[f64]) {
        let e = (i * self.periods + t) * self.q_x;
        self.x[e..e + self.q_x].copy_from_slice(values);
    }

    pub fn set_z(&mut self, i: usize, t: usize, values: &[f64]) {
        let e = (i * self.periods + t) * self.q_z;
        self.z[e..e + self.q_z].copy_from_slice(values);
    }

    pub fn x(&self, i: usize, t: usize) -> &[f64] {
        let e = (i * self.periods + t) * self.q_x;
        &self.x[e..e + self.q_x]
    }

    pub fn z(&self, i: usize, t: usize) -> &[f64] {
        let e = (i * self.periods + t) * self.q_z;
        &self.z[e..e + self.q_z]
    }
}

/// Built-in symmetric pair rules; `Concat` is only admissible on directed
/// panels since `(x_i, x_j) ≠ (x_j, x_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRule {
    Sum,
    AbsDiff,
    Concat,
}

impl PairRule {
    fn output_dim(&self, q: usize) -> usize {
        match self {
            PairRule::Sum | PairRule::AbsDiff => q,
            PairRule::Concat => 2 * q,
        }
    }

    fn apply(&self, a: &[f64], b: &[f64], out: &mut Vec<f64>) {
        match self {
            PairRule::Sum => out.extend(a.iter().zip(b).map(|(x, y)| x + y)),
            PairRule::AbsDiff => out.extend(a.iter().zip(b).map(|(x, y)| (x - y).abs())),
            PairRule::Concat => {
                out.extend_from_slice(a);
                out.extend_from_slice(b);
            }
        }
    }
}

/// Pair-level regressors composed from node-level data for all `i ≠ j`
/// (directed) or `i < j` (undirected) and all periods.
#[derive(Debug, Clone)]
pub struct DyadRegressors {
    n: usize,
    periods: usize,
    directed: bool,
    q_w: usize,
    q_r: usize,
    pairs: Vec<(u32, u32)>,
    w: Vec<f64>,
    r: Vec<f64>,
}

impl DyadRegressors {
    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn q_w(&self) -> usize {
        self.q_w
    }

    pub fn q_r(&self) -> usize {
        self.q_r
    }

    fn pair_index(&self, i: u32, j: u32) -> usize {
        let n = self.n as u32;
        assert!(i != j && i < n && j < n, "invalid pair ({i},{j})");
        if self.directed {
            let col = if j > i { j - 1 } else { j };
            (i * (n - 1) + col) as usize
        } else {
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            (a * (2 * n - a - 1) / 2 + (b - a - 1)) as usize
        }
    }

    pub fn w(&self, i: u32, j: u32, t: usize) -> &[f64] {
        let e = self.pair_index(i, j) * self.periods + t;
        &self.w[e * self.q_w..(e + 1) * self.q_w]
    }

    pub fn r(&self, i: u32, j: u32, t: usize) -> &[f64] {
        let e = self.pair_index(i, j) * self.periods + t;
        &self.r[e * self.q_r..(e + 1) * self.q_r]
    }
}

/// Compose `w_ijt = w(x_it, x_jt)` and `r_ijt = r(z_it, z_jt)` for every
/// dyad and period.
pub fn compose_pair_regressors(
    nodes: &NodeTable,
    w_rule: PairRule,
    r_rule: PairRule,
    directed: bool,
) -> Result<DyadRegressors> {
    if !directed && (w_rule == PairRule::Concat || r_rule == PairRule::Concat) {
        return Err(Error::Config(
            "concatenation is not a symmetric pair rule; undirected panels need w(x,y) = w(y,x)"
                .to_string(),
        ));
    }
    let n = nodes.n as u32;
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j || (!directed && j < i) {
                continue;
            }
            pairs.push((i, j));
        }
    }
    let q_w = w_rule.output_dim(nodes.q_x);
    let q_r = r_rule.output_dim(nodes.q_z);
    let mut w = Vec::with_capacity(pairs.len() * nodes.periods * q_w);
    let mut r = Vec::with_capacity(pairs.len() * nodes.periods * q_r);
    for &(i, j) in &pairs {
        for t in 0..nodes.periods {
            w_rule.apply(nodes.x(i as usize, t), nodes.x(j as usize, t), &mut w);
            r_rule.apply(nodes.z(i as usize, t), nodes.z(j as usize, t), &mut r);
        }
    }
    Ok(DyadRegressors {
        n: nodes.n,
        periods: nodes.periods,
        directed,
        q_w,
        q_r,
        pairs,
        w,
        r,
    })
}

/// Time-differenced estimation sample: one row per dyad and ordered period
/// pair `s < t` with `d_ijs · d_ijt = 1`, carrying
/// `Δy = y_s - y_t`, `Δw = w_s - w_t`, `Δr = r_s - r_t`.
#[derive(Debug, Clone)]
pub struct DifferencedSample {
    n: usize,
    n_pairs: usize,
    directed: bool,
    q_w: usize,
    q_r: usize,
    pair_i: Vec<u32>,
    pair_j: Vec<u32>,
    period_s: Vec<u32>,
    period_t: Vec<u32>,
    dy: Vec<f64>,
    dw: Vec<f64>,
    dr: Vec<f64>,
}

impl DifferencedSample {
    pub fn len(&self) -> usize {
        self.dy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dy.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// The normalization constant `N`: `n(n-1)/2` undirected, `n(n-1)`
    /// directed. It cancels in the point estimate but scales the variance
    /// estimator and the bandwidth sequence.
    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn q_w(&self) -> usize {
        self.q_w
    }

    pub fn q_r(&self) -> usize {
        self.q_r
    }

    pub fn pair(&self, row: usize) -> (u32, u32) {
        (self.pair_i[row], self.pair_j[row])
    }

    pub fn period_pair(&self, row: usize) -> (u32, u32) {
        (self.period_s[row], self.period_t[row])
    }

    pub fn dy(&self, row: usize) -> f64 {
        self.dy[row]
    }

    pub fn dw_row(&self, row: usize) -> &[f64] {
        &self.dw[row * self.q_w..(row + 1) * self.q_w]
    }

    pub fn dr_row(&self, row: usize) -> &[f64] {
        &self.dr[row * self.q_r..(row + 1) * self.q_r]
    }

    /// Selection index `Δr' γ` for one row.
    pub fn selection_index(&self, row: usize, gamma: &[f64]) -> f64 {
        self.dr_row(row).iter().zip(gamma).map(|(a, b)| a * b).sum()
    }

    /// Build a sample from pre-differenced rows `(i, j, s, t, Δy, Δw, Δr)`.
    /// `n_pairs` is the normalization constant `N`, not the row count.
    #[allow(clippy::too_many_arguments)]
    pub fn from_raw_rows(
        n: usize,
        n_pairs: usize,
        directed: bool,
        q_w: usize,
        q_r: usize,
        rows: &[(u32, u32, u32, u32, f64, Vec<f64>, Vec<f64>)],
    ) -> Result<DifferencedSample> {
        let mut s = DifferencedSample {
            n,
            n_pairs,
            directed,
            q_w,
            q_r,
            pair_i: Vec::new(),
            pair_j: Vec::new(),
            period_s: Vec::new(),
            period_t: Vec::new(),
            dy: Vec::new(),
            dw: Vec::new(),
            dr: Vec::new(),
        };
        for (i, j, ps, pt, dy, dw, dr) in rows {
            if dw.len() != q_w || dr.len() != q_r {
                return Err(Error::Invalid("row regressor length mismatch".to_string()));
            }
            if ps >= pt {
                return Err(Error::Invalid("period pair must satisfy s < t".to_string()));
            }
            s.pair_i.push(*i);
            s.pair_j.push(*j);
            s.period_s.push(*ps);
            s.period_t.push(*pt);
            s.dy.push(*dy);
            s.dw.extend_from_slice(dw);
            s.dr.extend_from_slice(dr);
        }
        Ok(s)
    }

    /// Test helper: multiply every `Δy` by `c` (scale-equivariance checks).
    pub fn scale_dy(&mut self, c: f64) {
        for v in &mut self.dy {
            *v *= c;
        }
    }

    /// Test helper: multiply `Δw` column `col` by `c`.
    pub fn scale_dw_column(&mut self, col: usize, c: f64) {
        for row in 0..self.len() {
            self.dw[row * self.q_w + col] *= c;
        }
    }
}

/// Difference a panel into the doubly-selected estimation sample.
pub fn difference(panel: &DyadicPanel) -> DifferencedSample {
    let periods = panel.period_count();
    let q_w = panel.q_w();
    let q_r = panel.q_r();
    let n = panel.node_count();
    let n_pairs = if panel.is_directed() { n * (n - 1) } else { n * (n - 1) / 2 };
    let mut s = DifferencedSample {
        n,
        n_pairs,
        directed: panel.is_directed(),
        q_w,
        q_r,
        pair_i: Vec::new(),
        pair_j: Vec::new(),
        period_s: Vec::new(),
        period_t: Vec::new(),
        dy: Vec::new(),
        dw: Vec::new(),
        dr: Vec::new(),
    };
    for (idx, &(i, j)) in panel.pairs().iter().enumerate() {
        for ts in 0..periods {
            for tt in (ts + 1)..periods {
                if !(panel.d(idx, ts) && panel.d(idx, tt)) {
                    continue;
                }
                s.pair_i.push(i);
                s.pair_j.push(j);
                s.period_s.push(ts as u32);
                s.period_t.push(tt as u32);
                s.dy.push(panel.y(idx, ts).unwrap() - panel.y(idx, tt).unwrap());
                let (ws, wt) = (panel.w(idx, ts), panel.w(idx, tt));
                s.dw.extend(ws.iter().zip(wt).map(|(a, b)| a - b));
                let (rs, rt) = (panel.r(idx, ts), panel.r(idx, tt));
                s.dr.extend(rs.iter().zip(rt).map(|(a, b)| a - b));
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_csv() -> &'static str {
        "i,j,t,d,y,w_1,r_1\n\
         a,b,1,1,5.0,2.0,0.5\n\
         a,b,2,1,3.0,1.0,0.25\n"
    }

    #[test]
    fn load_minimal_panel() {
        let panel = load_panel(small_csv().as_bytes(), &CsvSchema::default(), false).unwrap();
        assert_eq!(panel.node_count(), 2);
        assert_eq!(panel.period_count(), 2);
        assert_eq!(panel.stored_pair_count(), 1);
        assert_eq!(panel.q_w(), 1);
        assert_eq!(panel.q_r(), 1);
        assert!(panel.d(0, 0));
        assert_eq!(panel.y(0, 0), Some(5.0));
    }

    #[test]
    fn outcome_present_for_unselected_dyad_errors() {
        let csv = "i,j,t,d,y,w_1,r_1\n\
                   a,b,1,0,5.0,2.0,0.5\n\
                   a,b,2,1,3.0,1.0,0.25\n";
        let err = load_panel(csv.as_bytes(), &CsvSchema::default(), false).unwrap_err();
        assert!(err.to_string().contains("outcome present for unselected dyad"));
    }

    #[test]
    fn outcome_missing_for_selected_dyad_errors() {
        let csv = "i,j,t,d,y,w_1,r_1\n\
                   a,b,1,1,,2.0,0.5\n\
                   a,b,2,1,3.0,1.0,0.25\n";
        let err = load_panel(csv.as_bytes(), &CsvSchema::default(), false).unwrap_err();
        assert!(err.to_string().contains("outcome missing for selected dyad"));
    }

    #[test]
    fn duplicate_key_errors() {
        let csv = "i,j,t,d,y,w_1,r_1\n\
                   a,b,1,1,5.0,2.0,0.5\n\
                   a,b,1,1,5.0,2.0,0.5\n\
                   a,b,2,1,3.0,1.0,0.25\n";
        let err = load_panel(csv.as_bytes(), &CsvSchema::default(), false).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn asymmetric_undirected_errors() {
        let csv = "i,j,t,d,y,w_1,r_1\n\
                   a,b,1,1,5.0,2.0,0.5\n\
                   b,a,1,1,4.0,2.0,0.5\n\
                   a,b,2,1,3.0,1.0,0.25\n\
                   b,a,2,1,3.0,1.0,0.25\n";
        let err = load_panel(csv.as_bytes(), &CsvSchema::default(), false).unwrap_err();
        assert!(err.to_string().contains("asymmetric undirected input"));
    }

    #[test]
    fn symmetric_mirror_rows_deduplicate() {
        let csv = "i,j,t,d,y,w_1,r_1\n\
                   a,b,1,1,5.0,2.0,0.5\n\
                   b,a,1,1,5.0,2.0,0.5\n\
                   a,b,2,0,,1.0,0.25\n\
                   b,a,2,0,,1.0,0.25\n";
        let panel = load_panel(csv.as_bytes(), &CsvSchema::default(), false).unwrap();
        assert_eq!(panel.stored_pair_count(), 1);
    }

    #[test]
    fn missing_column_errors() {
        let csv = "i,j,t,d,w_1,r_1\na,b,1,1,2.0,0.5\n";
        let err = load_panel(csv.as_bytes(), &CsvSchema::default(), false).unwrap_err();
        assert!(err.to_string().contains("missing column 'y'"));
    }

    #[test]
    fn missing_period_errors() {
        let csv = "i,j,t,d,y,w_1,r_1\n\
                   a,b,1,1,5.0,2.0,0.5\n\
                   a,b,2,1,3.0,1.0,0.25\n\
                   a,c,1,0,,2.0,0.5\n";
        let err = load_panel(csv.as_bytes(), &CsvSchema::default(), false).unwrap_err();
        assert!(err.to_string().contains("missing period"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut builder = PanelBuilder::new(false);
        let n = 10;
        for i in 0..n {
            for j in (i + 1)..n {
                for t in 1..=2 {
                    let d: bool = rng.gen_bool(0.7);
                    let y = d.then(|| rng.gen_range(-5.0..5.0));
                    let w = [rng.gen_range(-3.0..3.0)];
                    let r = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                    builder
                        .add_row(&format!("n{i}"), &format!("n{j}"), &t.to_string(), d, y, &w, &r)
                        .unwrap();
                }
            }
        }
        let panel = builder.finish().unwrap();
        let mut buf = Vec::new();
        panel.save_csv(&mut buf).unwrap();
        let reloaded = load_panel(buf.as_slice(), &CsvSchema::default(), false).unwrap();
        assert_eq!(panel, reloaded);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let panel = load_panel(small_csv().as_bytes(), &CsvSchema::default(), false).unwrap();
        let mut buf = Vec::new();
        panel.save_json(&mut buf).unwrap();
        let reloaded = DyadicPanel::load_json(buf.as_slice()).unwrap();
        assert_eq!(panel, reloaded);
    }

    #[test]
    fn compose_sum_rule() {
        let mut nodes = NodeTable::new(2, 1, 1, 1);
        nodes.set_x(0, 0, &[1.0]);
        nodes.set_x(1, 0, &[2.0]);
        nodes.set_z(0, 0, &[0.5]);
        nodes.set_z(1, 0, &[0.25]);
        let regs = compose_pair_regressors(&nodes, PairRule::Sum, PairRule::Sum, false).unwrap();
        assert_eq!(regs.w(0, 1, 0), &[3.0]);
        assert_eq!(regs.r(0, 1, 0), &[0.75]);
    }

    #[test]
    fn compose_sum_rule_is_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut nodes = NodeTable::new(5, 2, 2, 1);
        for i in 0..5 {
            for t in 0..2 {
                nodes.set_x(i, t, &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                nodes.set_z(i, t, &[rng.gen_range(-1.0..1.0)]);
            }
        }
        let regs = compose_pair_regressors(&nodes, PairRule::Sum, PairRule::Sum, true).unwrap();
        for i in 0..5u32 {
            for j in 0..5u32 {
                if i == j {
                    continue;
                }
                assert_eq!(regs.w(i, j, 0), regs.w(j, i, 0));
                assert_eq!(regs.r(i, j, 1), regs.r(j, i, 1));
            }
        }
    }

    #[test]
    fn concat_rejected_for_undirected() {
        let nodes = NodeTable::new(3, 2, 1, 1);
        let err =
            compose_pair_regressors(&nodes, PairRule::Concat, PairRule::Sum, false).unwrap_err();
        assert!(err.to_string().contains("symmetric"));
    }

    #[test]
    fn difference_arithmetic() {
        let panel = load_panel(small_csv().as_bytes(), &CsvSchema::default(), false).unwrap();
        let sample = difference(&panel);
        assert_eq!(sample.len(), 1);
        assert_eq!(sample.dy(0), 2.0);
        assert_eq!(sample.dw_row(0), &[1.0]);
        assert_eq!(sample.dr_row(0), &[0.25]);
        assert_eq!(sample.n_pairs(), 1);
    }

    #[test]
    fn difference_filters_unselected() {
        let csv = "i,j,t,d,y,w_1,r_1\n\
                   a,b,1,1,5.0,2.0,0.5\n\
                   a,b,2,0,,1.0,0.25\n";
        let panel = load_panel(csv.as_bytes(), &CsvSchema::default(), false).unwrap();
        let sample = difference(&panel);
        assert!(sample.is_empty());
    }

    #[test]
    fn difference_emits_all_period_pairs() {
        let csv = "i,j,t,d,y,w_1,r_1\n\
                   a,b,1,1,5.0,2.0,0.5\n\
                   a,b,2,1,3.0,1.0,0.25\n\
                   a,b,3,1,1.0,0.5,0.1\n";
        let panel = load_panel(csv.as_bytes(), &CsvSchema::default(), false).unwrap();
        let sample = difference(&panel);
        assert_eq!(sample.len(), 3);
        let pairs: Vec<(u32, u32)> = (0..3).map(|r| sample.period_pair(r)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn difference_row_count_matches_filter() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut builder = PanelBuilder::new(false);
        let n = 8;
        let periods = 3;
        for i in 0..n {
            for j in (i + 1)..n {
                for t in 1..=periods {
                    let d: bool = rng.gen_bool(0.6);
                    let y = d.then(|| rng.gen_range(-5.0..5.0));
                    builder
                        .add_row(
                            &format!("n{i}"),
                            &format!("n{j}"),
                            &t.to_string(),
                            d,
                            y,
                            &[rng.gen_range(-1.0..1.0)],
                            &[rng.gen_range(-1.0..1.0)],
                        )
                        .unwrap();
                }
            }
        }
        let panel = builder.finish().unwrap();
        let sample = difference(&panel);
        let mut expected = 0usize;
        for idx in 0..panel.stored_pair_count() {
            for s in 0..periods {
                for t in (s + 1)..periods {
                    if panel.d(idx, s) && panel.d(idx, t) {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(sample.len(), expected);
    }

    #[test]
    fn directed_panels_keep_both_orientations() {
        let csv = "i,j,t,d,y,w_1,r_1\n\
                   a,b,1,1,5.0,2.0,0.5\n\
                   a,b,2,1,3.0,1.0,0.25\n\
                   b,a,1,1,4.0,2.5,0.5\n\
                   b,a,2,0,,1.5,0.25\n";
        let panel = load_panel(csv.as_bytes(), &CsvSchema::default(), true).unwrap();
        assert!(panel.is_directed());
        assert_eq!(panel.stored_pair_count(), 2);
        // asymmetric outcomes are fine on a directed panel
        let sample = difference(&panel);
        assert_eq!(sample.len(), 1); // only (a,b) is doubly selected
        let mut buf = Vec::new();
        panel.save_csv(&mut buf).unwrap();
        let reloaded = load_panel(buf.as_slice(), &CsvSchema::default(), true).unwrap();
        assert_eq!(panel, reloaded);
    }

    #[test]
    fn directed_path_doubles_rows() {
        let panel = load_panel(small_csv().as_bytes(), &CsvSchema::default(), false).unwrap();
        let directed = panel.to_directed();
        assert!(directed.is_directed());
        assert_eq!(directed.stored_pair_count(), 2);
        let sample = difference(&directed);
        assert_eq!(sample.len(), 2);
        assert_eq!(sample.n_pairs(), 2);
    }
}
