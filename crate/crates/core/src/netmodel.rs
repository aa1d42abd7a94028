//! Grid case files and the immutable network model.
//!
//! Two input formats are understood:
//!
//! * **MATPOWER** (`.m`): only the `baseMVA`, `bus`, `gen` and `branch` blocks are read. The
//!   tokenizer ignores `%` comments, accepts `;`/newline row separators and whitespace or
//!   comma column separators. Powers are converted to per-unit on `baseMVA`, angles to
//!   radians. Off-nominal tap ratios are folded into an exact asymmetric π-model; phase-shift
//!   angles are ignored.
//! * **Native CSV**: a `buses.csv` table (`id,kind,vm,va,pd,qd,gs,bs[,pg]`) and a
//!   `branches.csv` table (`from,to,r,x,b[,tap]`), all per-unit with angles in radians. A
//!   `# base_mva=<value>` comment line sets the base (default 100). [`parse_case`] accepts
//!   both tables concatenated in one text; each table is recognised by its header line.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Complex;
use thiserror::Error;

pub const IEEE14_MATPOWER: &str = include_str!("../data/case14.m");
pub const IEEE14_BUSES_CSV: &str = include_str!("../data/ieee14/buses.csv");
pub const IEEE14_BRANCHES_CSV: &str = include_str!("../data/ieee14/branches.csv");
/// Published AC solution of the IEEE 14-bus case (`id,vm,va_deg`).
pub const IEEE14_SOLVED_CSV: &str = include_str!("../data/ieee14_solved.csv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("malformed case: {0}")]
    MalformedCase(String),
    #[error("branch {from}-{to} references unknown bus {missing}")]
    InconsistentTopology { from: u32, to: u32, missing: u32 },
    #[error("network has no slack bus")]
    NoSlackBus,
    #[error("duplicate bus id {0}")]
    DuplicateBusId(u32),
    #[error("branch {from}-{to} has zero series impedance")]
    ZeroImpedance { from: u32, to: u32 },
    #[error("network failed validation: {0:?}")]
    Invalid(Vec<Diagnostic>),
    #[error("i/o error reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

impl BusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BusKind::Slack => "slack",
            BusKind::Pv => "pv",
            BusKind::Pq => "pq",
        }
    }
}

impl std::str::FromStr for BusKind {
    type Err = CaseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "slack" | "ref" | "3" => Ok(BusKind::Slack),
            "pv" | "2" => Ok(BusKind::Pv),
            "pq" | "1" => Ok(BusKind::Pq),
            other => Err(CaseError::MalformedCase(format!("unknown bus kind `{other}`"))),
        }
    }
}

/// One bus, all quantities per-unit on the model base.
#[derive(Debug, Clone, PartialEq)]
pub struct BusRecord {
    pub id: u32,
    pub kind: BusKind,
    /// Voltage magnitude: the set-point for slack/PV buses, the stored solution otherwise.
    pub vm: f64,
    /// Voltage angle in radians.
    pub va: f64,
    pub load_p: f64,
    pub load_q: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
    /// Scheduled real generation (sum over in-service generators at the bus).
    pub gen_p: f64,
}

impl BusRecord {
    pub fn new(id: u32, kind: BusKind) -> Self {
        Self {
            id,
            kind,
            vm: 1.0,
            va: 0.0,
            load_p: 0.0,
            load_q: 0.0,
            shunt_g: 0.0,
            shunt_b: 0.0,
            gen_p: 0.0,
        }
    }
}

/// One π-model branch. `tap` is the off-nominal turns ratio on the `from` side (1 for lines).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRecord {
    pub from_bus: u32,
    pub to_bus: u32,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance.
    pub charging_b: f64,
    pub tap: f64,
}

impl BranchRecord {
    pub fn line(from_bus: u32, to_bus: u32, r: f64, x: f64, charging_b: f64) -> Self {
        Self {
            from_bus,
            to_bus,
            r,
            x,
            charging_b,
            tap: 1.0,
        }
    }
}

/// Per-branch admittance parameters in the π-model.
///
/// `series_g + j·series_b` is the series admittance; `from_shunt` and `to_shunt` are the
/// shunt admittances at each end (half the line charging plus any tap correction).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance {
    pub series_g: f64,
    pub series_b: f64,
    pub from_shunt_g: f64,
    pub from_shunt_b: f64,
    pub to_shunt_g: f64,
    pub to_shunt_b: f64,
}

impl BranchAdmittance {
    pub fn series(&self) -> Complex<f64> {
        Complex::new(self.series_g, self.series_b)
    }

    pub fn from_shunt(&self) -> Complex<f64> {
        Complex::new(self.from_shunt_g, self.from_shunt_b)
    }

    pub fn to_shunt(&self) -> Complex<f64> {
        Complex::new(self.to_shunt_g, self.to_shunt_b)
    }
}

/// Decomposes a branch into `(g_ij, b_ij)` and per-end shunts `(g_i0, b_i0)`.
///
/// `y = 1/(r + jx)`. With a tap ratio `t` the exact equivalent π has series `y/t`, from-end
/// shunt `jb/(2t²) + y(1−t)/t²` and to-end shunt `jb/2 + y(t−1)/t`.
pub fn branch_admittance(branch: &BranchRecord) -> Result<BranchAdmittance, CaseError> {
    if branch.r == 0.0 && branch.x == 0.0 {
        return Err(CaseError::ZeroImpedance {
            from: branch.from_bus,
            to: branch.to_bus,
        });
    }
    let y = Complex::new(branch.r, branch.x).inv();
    let t = branch.tap;
    let half_charging = Complex::new(0.0, branch.charging_b / 2.0);
    let series = y / t;
    let from_shunt = half_charging / (t * t) + y * ((1.0 - t) / (t * t));
    let to_shunt = half_charging + y * ((t - 1.0) / t);
    Ok(BranchAdmittance {
        series_g: series.re,
        series_b: series.im,
        from_shunt_g: from_shunt.re,
        from_shunt_b: from_shunt.im,
        to_shunt_g: to_shunt.re,
        to_shunt_b: to_shunt.im,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    NoSlack,
    MultipleSlack(Vec<u32>),
    Disconnected(Vec<u32>),
    NonPositiveVoltage(u32),
    SelfLoop(u32),
    ZeroImpedance { from: u32, to: u32 },
    NonPositiveTap { from: u32, to: u32 },
    DanglingBranch { from: u32, to: u32 },
    DuplicateBusId(u32),
    AdjacencyMismatch(u32),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NoSlack => write!(f, "no slack bus"),
            Diagnostic::MultipleSlack(ids) => write!(f, "multiple slack buses: {ids:?}"),
            Diagnostic::Disconnected(ids) => write!(f, "buses unreachable from slack: {ids:?}"),
            Diagnostic::NonPositiveVoltage(id) => write!(f, "bus {id}: non-positive voltage"),
            Diagnostic::SelfLoop(id) => write!(f, "self-loop branch at bus {id}"),
            Diagnostic::ZeroImpedance { from, to } => {
                write!(f, "branch {from}-{to}: zero impedance")
            }
            Diagnostic::NonPositiveTap { from, to } => {
                write!(f, "branch {from}-{to}: non-positive tap")
            }
            Diagnostic::DanglingBranch { from, to } => {
                write!(f, "branch {from}-{to}: dangling endpoint")
            }
            Diagnostic::DuplicateBusId(id) => write!(f, "duplicate bus id {id}"),
            Diagnostic::AdjacencyMismatch(id) => write!(f, "bus {id}: adjacency out of sync"),
        }
    }
}

/// Immutable bus/branch topology. Shared freely between worker threads.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    buses: Vec<BusRecord>,
    branches: Vec<BranchRecord>,
    base_mva: f64,
    adjacency: Vec<Vec<usize>>,
    index: HashMap<u32, usize>,
}

impl PartialEq for NetworkModel {
    fn eq(&self, other: &Self) -> bool {
        self.buses == other.buses && self.branches == other.branches && self.base_mva == other.base_mva
    }
}

impl NetworkModel {
    /// Builds a model, rejecting duplicate ids, dangling branch endpoints and a missing
    /// slack bus. Softer problems are reported by [`validate_network`].
    pub fn new(buses: Vec<BusRecord>, branches: Vec<BranchRecord>, base_mva: f64) -> Result<Self, CaseError> {
        let mut index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(CaseError::DuplicateBusId(b.id));
            }
        }
        if !buses.iter().any(|b| b.kind == BusKind::Slack) {
            return Err(CaseError::NoSlackBus);
        }
        let mut adjacency = vec![Vec::new(); buses.len()];
        for (k, br) in branches.iter().enumerate() {
            for end in [br.from_bus, br.to_bus] {
                let Some(&i) = index.get(&end) else {
                    return Err(CaseError::InconsistentTopology {
                        from: br.from_bus,
                        to: br.to_bus,
                        missing: end,
                    });
                };
                if adjacency[i].last() != Some(&k) {
                    adjacency[i].push(k);
                }
            }
        }
        Ok(Self {
            buses,
            branches,
            base_mva,
            adjacency,
            index,
        })
    }

    pub fn buses(&self) -> &[BusRecord] {
        &self.buses
    }

    pub fn branches(&self) -> &[BranchRecord] {
        &self.branches
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Branch indices incident to the bus at position `bus_idx`.
    pub fn incident(&self, bus_idx: usize) -> &[usize] {
        &self.adjacency[bus_idx]
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn bus(&self, id: u32) -> Option<&BusRecord> {
        self.bus_index(id).map(|i| &self.buses[i])
    }

    /// Position of the (first) slack bus.
    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("constructor guarantees a slack bus")
    }

    /// Positions of all buses except the slack, in bus order. State vectors follow this order.
    pub fn non_slack_indices(&self) -> Vec<usize> {
        let s = self.slack_index();
        (0..self.buses.len()).filter(|&i| i != s).collect()
    }

    pub fn state_dim(&self) -> usize {
        2 * (self.buses.len() - 1)
    }

    /// Serialises into the native CSV layout accepted by [`parse_case`].
    pub fn to_native_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# base_mva={}", self.base_mva);
        out.push_str("id,kind,vm,va,pd,qd,gs,bs,pg\n");
        for b in &self.buses {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                b.id,
                b.kind.as_str(),
                b.vm,
                b.va,
                b.load_p,
                b.load_q,
                b.shunt_g,
                b.shunt_b,
                b.gen_p
            );
        }
        out.push_str("from,to,r,x,b,tap\n");
        for br in &self.branches {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                br.from_bus, br.to_bus, br.r, br.x, br.charging_b, br.tap
            );
        }
        out
    }
}

/// Checks every structural invariant; an empty result means the model is usable.
pub fn validate_network(model: &NetworkModel) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut seen = HashMap::new();
    for b in &model.buses {
        if seen.insert(b.id, ()).is_some() {
            diags.push(Diagnostic::DuplicateBusId(b.id));
        }
    }
    let slacks: Vec<u32> = model
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .map(|b| b.id)
        .collect();
    match slacks.len() {
        0 => diags.push(Diagnostic::NoSlack),
        1 => {}
        _ => diags.push(Diagnostic::MultipleSlack(slacks)),
    }
    for b in &model.buses {
        if !(b.vm > 0.0) {
            diags.push(Diagnostic::NonPositiveVoltage(b.id));
        }
    }
    for br in &model.branches {
        if br.from_bus == br.to_bus {
            diags.push(Diagnostic::SelfLoop(br.from_bus));
        }
        if br.r == 0.0 && br.x == 0.0 {
            diags.push(Diagnostic::ZeroImpedance {
                from: br.from_bus,
                to: br.to_bus,
            });
        }
        if !(br.tap > 0.0) {
            diags.push(Diagnostic::NonPositiveTap {
                from: br.from_bus,
                to: br.to_bus,
            });
        }
        if model.bus_index(br.from_bus).is_none() || model.bus_index(br.to_bus).is_none() {
            diags.push(Diagnostic::DanglingBranch {
                from: br.from_bus,
                to: br.to_bus,
            });
        }
    }
    for (i, b) in model.buses.iter().enumerate() {
        let expected: Vec<usize> = model
            .branches
            .iter()
            .enumerate()
            .filter(|(_, br)| br.from_bus == b.id || br.to_bus == b.id)
            .map(|(k, _)| k)
            .collect();
        if model.adjacency.get(i) != Some(&expected) {
            diags.push(Diagnostic::AdjacencyMismatch(b.id));
        }
    }
    if let Some(start) = model.buses.iter().position(|b| b.kind == BusKind::Slack) {
        let mut reached = vec![false; model.buses.len()];
        let mut queue = VecDeque::from([start]);
        reached[start] = true;
        while let Some(i) = queue.pop_front() {
            for &k in &model.adjacency[i] {
                let br = &model.branches[k];
                for end in [br.from_bus, br.to_bus] {
                    if let Some(j) = model.bus_index(end) {
                        if !reached[j] {
                            reached[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        let isolated: Vec<u32> = model
            .buses
            .iter()
            .zip(&reached)
            .filter(|(_, &r)| !r)
            .map(|(b, _)| b.id)
            .collect();
        if !isolated.is_empty() {
            diags.push(Diagnostic::Disconnected(isolated));
        }
    }
    diags
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseFormat {
    Matpower,
    NativeCsv,
}

/// Parses case text into a validated model.
pub fn parse_case(text: &str, format: CaseFormat) -> Result<NetworkModel, CaseError> {
    if text.trim().is_empty() {
        return Err(CaseError::MalformedCase("empty case text".into()));
    }
    let model = match format {
        CaseFormat::Matpower => parse_matpower(text)?,
        CaseFormat::NativeCsv => parse_native_csv(text)?,
    };
    let diags = validate_network(&model);
    if diags.is_empty() {
        Ok(model)
    } else {
        Err(CaseError::Invalid(diags))
    }
}

/// Loads a case from disk: a `.m` file, a combined `.csv` file, or a directory holding
/// `buses.csv` and `branches.csv`.
pub fn load_case(path: &Path) -> Result<NetworkModel, CaseError> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|e| CaseError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })
    };
    if path.is_dir() {
        let buses = read(&path.join("buses.csv"))?;
        let branches = read(&path.join("branches.csv"))?;
        return parse_case(&format!("{buses}\n{branches}"), CaseFormat::NativeCsv);
    }
    let text = read(path)?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("m") => CaseFormat::Matpower,
        _ => CaseFormat::NativeCsv,
    };
    parse_case(&text, format)
}

/// The bundled IEEE 14-bus system (MATPOWER form).
pub fn ieee14() -> NetworkModel {
    parse_case(IEEE14_MATPOWER, CaseFormat::Matpower).expect("bundled case parses")
}

/// Published solved voltages of the bundled IEEE 14-bus case as `(id, vm, va_radians)`.
pub fn ieee14_published_solution() -> Vec<(u32, f64, f64)> {
    let mut rdr = csv_reader(IEEE14_SOLVED_CSV);
    rdr.records()
        .map(|rec| {
            let rec = rec.expect("bundled solution is valid csv");
            let id: u32 = rec[0].parse().expect("id");
            let vm: f64 = rec[1].parse().expect("vm");
            let va: f64 = rec[2].parse::<f64>().expect("va").to_radians();
            (id, vm, va)
        })
        .collect()
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn parse_f64(field: &str, what: &str) -> Result<f64, CaseError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| CaseError::MalformedCase(format!("bad {what} value `{field}`")))
}

fn parse_id(field: &str) -> Result<u32, CaseError> {
    let v = parse_f64(field, "bus id")?;
    if v < 0.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
        return Err(CaseError::MalformedCase(format!("bad bus id `{field}`")));
    }
    Ok(v as u32)
}

fn parse_native_csv(text: &str) -> Result<NetworkModel, CaseError> {
    let mut base_mva = 100.0;
    let mut bus_section = String::new();
    let mut branch_section = String::new();
    let mut current: Option<&mut String> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("base_mva=") {
                base_mva = parse_f64(v, "base_mva")?;
            }
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let lower = trimmed.to_ascii_lowercase();
        if lower.starts_with("id,") {
            current = Some(&mut bus_section);
        } else if lower.starts_with("from,") {
            current = Some(&mut branch_section);
        }
        match current.as_deref_mut() {
            Some(section) => {
                section.push_str(trimmed);
                section.push('\n');
            }
            None => {
                return Err(CaseError::MalformedCase(format!(
                    "data before any table header: `{trimmed}`"
                )))
            }
        }
    }
    if bus_section.is_empty() {
        return Err(CaseError::MalformedCase("missing bus table".into()));
    }

    let mut buses = Vec::new();
    let mut rdr = csv_reader(&bus_section);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CaseError::MalformedCase(e.to_string()))?;
        if rec.len() < 8 {
            return Err(CaseError::MalformedCase(format!(
                "bus row has {} columns, expected at least 8",
                rec.len()
            )));
        }
        buses.push(BusRecord {
            id: parse_id(&rec[0])?,
            kind: rec[1].parse()?,
            vm: parse_f64(&rec[2], "vm")?,
            va: parse_f64(&rec[3], "va")?,
            load_p: parse_f64(&rec[4], "pd")?,
            load_q: parse_f64(&rec[5], "qd")?,
            shunt_g: parse_f64(&rec[6], "gs")?,
            shunt_b: parse_f64(&rec[7], "bs")?,
            gen_p: match rec.get(8) {
                Some(v) if !v.is_empty() => parse_f64(v, "pg")?,
                _ => 0.0,
            },
        });
    }

    let mut branches = Vec::new();
    if !branch_section.is_empty() {
        let mut rdr = csv_reader(&branch_section);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CaseError::MalformedCase(e.to_string()))?;
            if rec.len() < 5 {
                return Err(CaseError::MalformedCase(format!(
                    "branch row has {} columns, expected at least 5",
                    rec.len()
                )));
            }
            branches.push(BranchRecord {
                from_bus: parse_id(&rec[0])?,
                to_bus: parse_id(&rec[1])?,
                r: parse_f64(&rec[2], "r")?,
                x: parse_f64(&rec[3], "x")?,
                charging_b: parse_f64(&rec[4], "b")?,
                tap: match rec.get(5) {
                    Some(v) if !v.is_empty() => parse_f64(v, "tap")?,
                    _ => 1.0,
                },
            });
        }
    }
    NetworkModel::new(buses, branches, base_mva)
}

/// Extracts the rows of `mpc.<name> = [ ... ];`.
fn matpower_matrix(text: &str, name: &str) -> Result<Option<Vec<Vec<f64>>>, CaseError> {
    let key = format!("mpc.{name}");
    let Some(start) = find_assignment(text, &key) else {
        return Ok(None);
    };
    let rest = &text[start..];
    let open = rest
        .find('[')
        .ok_or_else(|| CaseError::MalformedCase(format!("`{key}` has no opening bracket")))?;
    let close = rest[open..]
        .find(']')
        .ok_or_else(|| CaseError::MalformedCase(format!("`{key}` has no closing bracket")))?;
    let body = &rest[open + 1..open + close];
    let mut rows = Vec::new();
    for line in body.lines() {
        let line = line.split('%').next().unwrap_or("");
        for chunk in line.split(';') {
            let row: Result<Vec<f64>, _> = chunk
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| parse_f64(t, &key))
                .collect();
            let row = row?;
            if !row.is_empty() {
                rows.push(row);
            }
        }
    }
    Ok(Some(rows))
}

/// Byte offset just after `key` where `key` is followed (modulo spaces) by `=`, skipping
/// occurrences inside comments.
fn find_assignment(text: &str, key: &str) -> Option<usize> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let code = line.split('%').next().unwrap_or("");
        if let Some(pos) = code.find(key) {
            let after = &code[pos + key.len()..];
            if after.trim_start().starts_with('=') {
                return Some(offset + pos + key.len());
            }
        }
        offset += line.len();
    }
    None
}

fn matpower_scalar(text: &str, name: &str) -> Result<Option<f64>, CaseError> {
    let key = format!("mpc.{name}");
    let Some(start) = find_assignment(text, &key) else {
        return Ok(None);
    };
    let rest = &text[start..];
    let eq = rest.find('=').expect("find_assignment guarantees `=`");
    let end = rest[eq..].find(';').map(|e| eq + e).unwrap_or(rest.len());
    parse_f64(rest[eq + 1..end].trim(), &key).map(Some)
}

fn parse_matpower(text: &str) -> Result<NetworkModel, CaseError> {
    let base_mva =
        matpower_scalar(text, "baseMVA")?.ok_or_else(|| CaseError::MalformedCase("missing mpc.baseMVA".into()))?;
    if !(base_mva > 0.0) {
        return Err(CaseError::MalformedCase("baseMVA must be positive".into()));
    }
    let bus_rows = matpower_matrix(text, "bus")?.ok_or_else(|| CaseError::MalformedCase("missing mpc.bus".into()))?;
    let branch_rows =
        matpower_matrix(text, "branch")?.ok_or_else(|| CaseError::MalformedCase("missing mpc.branch".into()))?;
    let gen_rows = matpower_matrix(text, "gen")?.unwrap_or_default();

    let mut buses = Vec::with_capacity(bus_rows.len());
    for row in &bus_rows {
        if row.len() < 9 {
            return Err(CaseError::MalformedCase(format!(
                "bus row has {} columns, expected at least 9",
                row.len()
            )));
        }
        let kind = match row[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            t => {
                return Err(CaseError::MalformedCase(format!(
                    "unsupported bus type {t} at bus {}",
                    row[0]
                )))
            }
        };
        buses.push(BusRecord {
            id: parse_id(&row[0].to_string())?,
            kind,
            vm: row[7],
            va: row[8].to_radians(),
            load_p: row[2] / base_mva,
            load_q: row[3] / base_mva,
            shunt_g: row[4] / base_mva,
            shunt_b: row[5] / base_mva,
            gen_p: 0.0,
        });
    }
    for row in &gen_rows {
        if row.len() < 8 {
            return Err(CaseError::MalformedCase(format!(
                "gen row has {} columns, expected at least 8",
                row.len()
            )));
        }
        if row[7] <= 0.0 {
            continue;
        }
        let id = parse_id(&row[0].to_string())?;
        let bus = buses
            .iter_mut()
            .find(|b| b.id == id)
            .ok_or_else(|| CaseError::MalformedCase(format!("generator at unknown bus {id}")))?;
        bus.gen_p += row[1] / base_mva;
        if bus.kind != BusKind::Pq {
            bus.vm = row[5];
        }
    }
    let mut branches = Vec::with_capacity(branch_rows.len());
    for row in &branch_rows {
        if row.len() < 5 {
            return Err(CaseError::MalformedCase(format!(
                "branch row has {} columns, expected at least 5",
                row.len()
            )));
        }
        if row.get(10).is_some_and(|&status| status <= 0.0) {
            continue;
        }
        let ratio = row.get(8).copied().unwrap_or(0.0);
        branches.push(BranchRecord {
            from_bus: parse_id(&row[0].to_string())?,
            to_bus: parse_id(&row[1].to_string())?,
            r: row[2],
            x: row[3],
            charging_b: row[4],
            tap: if ratio == 0.0 { 1.0 } else { ratio },
        });
    }
    NetworkModel::new(buses, branches, base_mva)
}
