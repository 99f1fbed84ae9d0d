//! The `skpk` command-line front end.
//!
//! Exit codes: 0 on success, 1 on input or validation errors, 2 when a
//! reproduction check or an enforced compliance verdict fails.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Number, Value};

use crate::audit::{
    achieved_rate_pair, check_definition, exact_audit, exact_audit_with_budget, mc_audit,
    AuditError, ComplianceVerdict, SecrecyReport, DEFAULT_STATE_BUDGET,
};
use crate::info::{binary_entropy, conditional_mutual_information, VarSet};
use crate::protocol::{
    binning_protocol, example1_pk_protocol, example1_sk_protocol, time_share, BinningParams,
    ProtocolDescriptor, ProtocolError,
};
use crate::region::{
    compute_abc, contains, exact_region, inner_bound, notable_points, outer_bound, pk_capacity,
    sk_capacity, vertices, RatePair, RegionSpec, THEOREM3_TOL, VERTEX_TOL,
};
use crate::source::{cascade_bsc_source, xor_source, JointPmf3, SourceSpec};
use crate::util::{fmt_sig12, round_sig12};

#[derive(Debug, Parser)]
#[command(
    name = "skpk",
    version,
    about = "Secret-key / private-key rate regions and protocol audits for three-terminal sources"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Export half-planes, vertices, notable points and scalars of the rate regions.
    Region(RegionArgs),
    /// Reproduce the two worked examples and print a pass/fail table.
    Examples(ExamplesArgs),
    /// Run the random-binning protocol and audit it.
    Simulate(SimulateArgs),
    /// Audit a protocol against the secrecy definition at a given eps.
    Audit(AuditArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Output directory, created if missing.
    #[arg(long, default_value = "skpk-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RegionArgs {
    /// Inline builder (`xor`, `point_mass`, `cascade_bsc:p,q`, `table@path`)
    /// or a path to a source-spec file.
    #[arg(long)]
    pub source: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Only {
    Example1,
    Example2,
}

#[derive(Debug, Args)]
pub struct ExamplesArgs {
    #[arg(long, value_enum)]
    pub only: Option<Only>,
    /// Crossover probability of the X-Y channel in the cascade example.
    #[arg(long, default_value_t = 0.25)]
    pub p: f64,
    /// Crossover probability of the X-Z channel in the cascade example.
    #[arg(long, default_value_t = 0.1)]
    pub q: f64,
    /// Corrupt one slot of the secret-key scheme (negative-path check).
    #[arg(long)]
    pub inject_fault: bool,
    /// Also write the check table to this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 10_000)]
    pub trials: u64,
    /// Seeds both the binning codebook and the Monte Carlo sampler.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.35)]
    pub slack: f64,
    #[arg(long)]
    pub sk_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub pk_rate: f64,
    /// Largest state space the exact audit may enumerate.
    #[arg(long, default_value_t = DEFAULT_STATE_BUDGET)]
    pub budget: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// `example1_sk`, `example1_pk`, an inline JSON descriptor or a path to one.
    #[arg(long)]
    pub protocol: String,
    #[arg(long)]
    pub source: String,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Exit 2 when the verdict fails.
    #[arg(long)]
    pub enforce: bool,
    #[arg(long, default_value_t = DEFAULT_STATE_BUDGET)]
    pub budget: u64,
    /// Fall back to a Monte Carlo audit with this many trials when the
    /// exact audit exceeds the budget.
    #[arg(long, requires = "seed")]
    pub trials: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Region(args) => cmd_region(&args),
        Command::Examples(args) => cmd_examples(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Audit(args) => cmd_audit(&args),
    }
}

/// Resolve an inline builder, falling back to a source-spec file path.
pub fn load_source(text: &str) -> Result<JointPmf3> {
    let spec = match SourceSpec::parse_inline(text) {
        Ok(spec) => spec,
        Err(inline_err) => {
            let path = Path::new(text);
            if path.is_file() {
                SourceSpec::load(path)?
            } else {
                return Err(inline_err).context("invalid --source");
            }
        }
    };
    spec.build().context("invalid source")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Flag(bool),
    Null,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(x) => fmt_sig12(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Flag(b) => b.to_string(),
            Cell::Null => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(x) => Number::from_f64(round_sig12(*x)).map_or(Value::Null, Value::Number),
            Cell::Int(i) => Value::from(*i),
            Cell::Text(s) => Value::from(s.as_str()),
            Cell::Flag(b) => Value::from(*b),
            Cell::Null => Value::Null,
        }
    }
}

/// A result table. Single-record tables render as one JSON object rather
/// than an array.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
    pub record: bool,
}

impl Table {
    fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
            record: false,
        }
    }

    fn record(columns: &[&'static str], row: Vec<Cell>) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: vec![row],
            record: true,
        }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => {
                let mut writer = csv::Writer::from_writer(Vec::new());
                writer.write_record(&self.columns)?;
                for row in &self.rows {
                    writer.write_record(row.iter().map(Cell::csv))?;
                }
                Ok(String::from_utf8(writer.into_inner()?)?)
            }
            Format::Json => {
                let objects: Vec<Value> = self
                    .rows
                    .iter()
                    .map(|row| {
                        let map: Map<String, Value> = self
                            .columns
                            .iter()
                            .zip(row)
                            .map(|(c, v)| (c.to_string(), v.json()))
                            .collect();
                        Value::Object(map)
                    })
                    .collect();
                let value = if self.record {
                    objects.into_iter().next().unwrap_or(Value::Null)
                } else {
                    Value::Array(objects)
                };
                Ok(serde_json::to_string_pretty(&value)? + "\n")
            }
        }
    }
}

fn write_table(output: &OutputArgs, stem: &str, table: &Table) -> Result<PathBuf> {
    write_table_to(&output.out, output.format, stem, table)
}

fn write_table_to(dir: &Path, format: Format, stem: &str, table: &Table) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{stem}.{}", format.extension()));
    fs::write(&path, table.render(format)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn halfplane_table(regions: &[&RegionSpec]) -> Table {
    let mut table = Table::new(&["label", "coefA", "coefB", "bound"]);
    for region in regions {
        for h in region.halfplanes() {
            table.push(vec![
                Cell::Text(format!("{}:{}", region.kind, h.label)),
                Cell::Num(h.coef_rs),
                Cell::Num(h.coef_rp),
                Cell::Num(h.bound),
            ]);
        }
    }
    table
}

pub fn vertex_table(regions: &[&RegionSpec]) -> Result<Table> {
    let mut table = Table::new(&["label", "rs", "rp"]);
    for region in regions {
        for v in vertices(region)? {
            table.push(vec![
                Cell::Text(region.kind.to_string()),
                Cell::Num(v.rs),
                Cell::Num(v.rp),
            ]);
        }
    }
    Ok(table)
}

pub fn report_table(report: &SecrecyReport) -> Table {
    let mut columns = vec!["n", "mode", "trials"];
    let mut row = vec![
        Cell::Int(report.n as u64),
        Cell::Text(mode_name(report).to_string()),
        report.trials.map_or(Cell::Null, Cell::Int),
    ];
    for (name, value) in report.numeric_fields() {
        columns.push(name);
        row.push(Cell::Num(value));
    }
    Table::record(&columns, row)
}

fn mode_name(report: &SecrecyReport) -> &'static str {
    match report.mode {
        crate::audit::AuditMode::Exact => "exact",
        crate::audit::AuditMode::MonteCarlo => "monte_carlo",
    }
}

pub fn verdict_table(verdict: &ComplianceVerdict) -> Table {
    let mut table = Table::new(&["name", "eps", "value", "margin", "pass"]);
    for check in &verdict.checks {
        table.push(vec![
            Cell::Text(check.name.clone()),
            Cell::Num(verdict.eps),
            Cell::Num(check.value),
            Cell::Num(check.margin),
            Cell::Flag(check.pass),
        ]);
    }
    table
}

fn cmd_region(args: &RegionArgs) -> Result<i32> {
    let pmf = load_source(&args.source)?;
    let outer = outer_bound(&pmf);
    let inner = inner_bound(&pmf);
    let exact = exact_region(&pmf, THEOREM3_TOL);
    let mut regions = vec![&outer, &inner];
    regions.extend(exact.as_ref());

    write_table(&args.output, "halfplanes", &halfplane_table(&regions))?;
    write_table(&args.output, "vertices", &vertex_table(&regions)?)?;

    let notable = notable_points(&pmf);
    let mut points = Table::new(&["label", "rs", "rp", "clamped"]);
    for p in &notable.points {
        points.push(vec![
            Cell::Text(p.label.clone()),
            Cell::Num(p.point.rs),
            Cell::Num(p.point.rp),
            Cell::Flag(p.clamped),
        ]);
    }
    write_table(&args.output, "points", &points)?;

    let abc = compute_abc(&pmf);
    let scalars = Table::record(
        &["A", "B", "C", "sk_capacity", "pk_capacity", "case"],
        vec![
            Cell::Num(abc.a),
            Cell::Num(abc.b),
            Cell::Num(abc.c),
            Cell::Num(sk_capacity(&pmf)),
            Cell::Num(pk_capacity(&pmf)),
            Cell::Text(notable.case.to_string()),
        ],
    );
    write_table(&args.output, "scalars", &scalars)?;
    println!(
        "A={} B={} C={} case={} exact_region={}",
        fmt_sig12(abc.a),
        fmt_sig12(abc.b),
        fmt_sig12(abc.c),
        notable.case,
        exact.is_some()
    );
    Ok(0)
}

/// One row of the `examples` table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleCheck {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> ExampleCheck {
    ExampleCheck { name, pass, detail }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn same_vertices(got: &[RatePair], want: &[RatePair], tol: f64) -> bool {
    got.len() == want.len()
        && want.iter().all(|w| {
            got.iter()
                .any(|g| close(g.rs, w.rs, tol) && close(g.rp, w.rp, tol))
        })
}

fn perfect(report: &SecrecyReport, rs: f64, rp: f64) -> bool {
    let zero = 1e-12;
    report.worst_epsilon() <= zero
        && report.cross_key_rate <= zero
        && close(report.achieved_sk_rate, rs, zero)
        && close(report.achieved_pk_rate, rp, zero)
}

fn report_detail(report: &SecrecyReport) -> String {
    format!(
        "worst_eps={} cross={} rates=({}, {})",
        fmt_sig12(report.worst_epsilon()),
        fmt_sig12(report.cross_key_rate),
        fmt_sig12(report.achieved_sk_rate),
        fmt_sig12(report.achieved_pk_rate)
    )
}

/// Checks for the xor source and its two perfect schemes. With
/// `inject_fault` the secret-key scheme's third slot is corrupted.
pub fn example1_checks(inject_fault: bool) -> Result<Vec<ExampleCheck>> {
    let pmf = xor_source();
    let mut checks = Vec::new();

    let sk = sk_capacity(&pmf);
    let pk = pk_capacity(&pmf);
    checks.push(check(
        "example1.sk_capacity",
        close(sk, 0.5, 1e-12),
        fmt_sig12(sk),
    ));
    checks.push(check(
        "example1.pk_capacity",
        close(pk, 1.0, 1e-12),
        fmt_sig12(pk),
    ));

    let want = [
        RatePair::new(0.0, 0.0),
        RatePair::new(0.5, 0.0),
        RatePair::new(0.0, 1.0),
    ];
    let outer = vertices(&outer_bound(&pmf))?;
    let inner = vertices(&inner_bound(&pmf))?;
    checks.push(check(
        "example1.region_coincidence",
        same_vertices(&outer, &want, 1e-12) && same_vertices(&inner, &want, 1e-12),
        format!("outer={} inner={}", outer.len(), inner.len()),
    ));

    let mut sk_scheme = example1_sk_protocol();
    if inject_fault {
        sk_scheme = sk_scheme.with_corrupted_slot(3);
    }
    let report = exact_audit(&sk_scheme, &pmf)?;
    checks.push(check(
        "example1.sk_scheme_perfect",
        perfect(&report, 0.5, 0.0),
        report_detail(&report),
    ));

    let report = exact_audit(&example1_pk_protocol(), &pmf)?;
    checks.push(check(
        "example1.pk_scheme_perfect",
        perfect(&report, 0.0, 1.0),
        report_detail(&report),
    ));

    let shared = time_share(&example1_sk_protocol(), &example1_pk_protocol(), 1, 2)?;
    let report = exact_audit(&shared, &pmf)?;
    let boundary = 2.0 * report.achieved_sk_rate + report.achieved_pk_rate;
    checks.push(check(
        "example1.timeshare_boundary",
        perfect(&report, 0.25, 0.5) && close(boundary, 1.0, 1e-12),
        report_detail(&report),
    ));
    Ok(checks)
}

/// Closed-form cross-checks for the cascade source at `(p, q)`.
pub fn example2_checks(p: f64, q: f64) -> Result<Vec<ExampleCheck>> {
    let pmf = cascade_bsc_source(p, q)?;
    let h = |x: f64| binary_entropy(x).expect("probability in range");
    let (hp, hq, hpq) = (h(p), h(q), h(p + q - 2.0 * p * q));
    let mut checks = Vec::new();

    let abc = compute_abc(&pmf);
    let (a, b, c) = (1.0 - hq, 1.0 - hp, 1.0 - (hp + hq) / 2.0);
    checks.push(check(
        "example2.abc",
        close(abc.a, a, 1e-9) && close(abc.b, b, 1e-9) && close(abc.c, c, 1e-9),
        format!(
            "A={} B={} C={}",
            fmt_sig12(abc.a),
            fmt_sig12(abc.b),
            fmt_sig12(abc.c)
        ),
    ));

    checks.push(check(
        "example2.theorem3_condition",
        abc.min() >= abc.b - THEOREM3_TOL,
        format!("min={} B={}", fmt_sig12(abc.min()), fmt_sig12(abc.b)),
    ));

    let exact = exact_region(&pmf, THEOREM3_TOL);
    let region_ok = exact.as_ref().is_some_and(|r| {
        let matches = |label: &str, cs: f64, cp: f64, bound: f64| {
            r.halfplane(label).is_some_and(|hp| {
                close(hp.coef_rs, cs, 1e-9)
                    && close(hp.coef_rp, cp, 1e-9)
                    && close(hp.bound, bound, 1e-9)
            })
        };
        r.halfplanes().len() == 2
            && matches("eq7", 0.0, 1.0, hpq - hp)
            && matches("eq8", 1.0, 1.0, 1.0 - hp)
    });
    checks.push(check(
        "example2.exact_region",
        region_ok,
        format!("rp<={} rs+rp<={}", fmt_sig12(hpq - hp), fmt_sig12(1.0 - hp)),
    ));

    let markov = conditional_mutual_information(&pmf, VarSet::Y, VarSet::Z, VarSet::X)?;
    checks.push(check(
        "example2.markov",
        markov <= 1e-12,
        format!("I(Y;Z|X)={}", fmt_sig12(markov)),
    ));
    Ok(checks)
}

fn cmd_examples(args: &ExamplesArgs) -> Result<i32> {
    let mut checks = Vec::new();
    if args.only != Some(Only::Example2) {
        checks.extend(example1_checks(args.inject_fault)?);
    }
    if args.only != Some(Only::Example1) {
        checks.extend(example2_checks(args.p, args.q)?);
    }

    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{status}  {:width$}  {}", c.name, c.detail);
    }
    if let Some(dir) = &args.out {
        let mut table = Table::new(&["name", "pass", "detail"]);
        for c in &checks {
            table.push(vec![
                Cell::Text(c.name.to_string()),
                Cell::Flag(c.pass),
                Cell::Text(c.detail.clone()),
            ]);
        }
        write_table_to(dir, args.format, "examples", &table)?;
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} checks, {} failed", checks.len(), failed);
    Ok(if failed == 0 { 0 } else { 2 })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let pmf = load_source(&args.source)?;
    let params = BinningParams {
        n: args.n,
        slack: args.slack,
        sk_rate: args.sk_rate,
        pk_rate: args.pk_rate,
        seed: args.seed,
    };
    let protocol = match binning_protocol(&pmf, &params) {
        Ok(p) => p,
        Err(err @ ProtocolError::RateInfeasible { .. }) => bail!(err),
        Err(err) => return Err(err.into()),
    };

    let mc = mc_audit(&protocol, &pmf, args.trials, args.seed)?;
    write_table(&args.output, "mc_report", &report_table(&mc))?;

    let exact = match exact_audit_with_budget(&protocol, &pmf, args.budget) {
        Ok(report) => {
            write_table(&args.output, "exact_report", &report_table(&report))?;
            Some(report)
        }
        Err(AuditError::StateSpaceTooLarge { .. }) => None,
        Err(err) => return Err(err.into()),
    };

    let audited = exact.as_ref().unwrap_or(&mc);
    let pair = achieved_rate_pair(audited);
    let outer = outer_bound(&pmf);
    let summary = Table::record(
        &[
            "exact_audit",
            "pair_from",
            "rs",
            "rp",
            "in_outer_bound",
            "in_outer_bound_with_deficits",
        ],
        vec![
            Cell::Text(if exact.is_some() { "done" } else { "mc-only" }.to_string()),
            Cell::Text(mode_name(audited).to_string()),
            Cell::Num(pair.rs),
            Cell::Num(pair.rp),
            Cell::Flag(contains(&outer, &pair, VERTEX_TOL)),
            Cell::Flag(contains(
                &outer,
                &pair,
                VERTEX_TOL + audited.worst_epsilon(),
            )),
        ],
    );
    write_table(&args.output, "summary", &summary)?;

    println!(
        "mc sk_error={} exact={} pair=({}, {})",
        fmt_sig12(mc.sk_error),
        exact
            .as_ref()
            .map_or("mc-only".to_string(), |r| fmt_sig12(r.sk_error)),
        fmt_sig12(pair.rs),
        fmt_sig12(pair.rp)
    );
    Ok(0)
}

/// Accept a protocol name, an inline JSON descriptor or a descriptor file.
pub fn parse_protocol(text: &str) -> Result<ProtocolDescriptor> {
    let text = text.trim();
    match text {
        "example1_sk" => return Ok(ProtocolDescriptor::Example1Sk),
        "example1_pk" => return Ok(ProtocolDescriptor::Example1Pk),
        _ => {}
    }
    let json = if text.starts_with('{') {
        text.to_string()
    } else {
        let path = Path::new(text);
        if !path.is_file() {
            bail!("unknown protocol {text:?}");
        }
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
    };
    Ok(ProtocolDescriptor::from_json(&json)?)
}

fn cmd_audit(args: &AuditArgs) -> Result<i32> {
    let descriptor = parse_protocol(&args.protocol)?;
    let pmf = load_source(&args.source)?;
    let protocol = descriptor.build(&pmf)?;
    let report = match exact_audit_with_budget(&protocol, &pmf, args.budget) {
        Ok(report) => report,
        Err(AuditError::StateSpaceTooLarge { states, budget }) => match (args.trials, args.seed) {
            (Some(trials), Some(seed)) => mc_audit(&protocol, &pmf, trials, seed)?,
            _ => bail!(
                "exact audit needs {states} states (budget {budget}); pass --trials and --seed for a Monte Carlo audit"
            ),
        },
        Err(err) => return Err(err.into()),
    };
    let verdict = check_definition(&report, args.eps);
    write_table(&args.output, "report", &report_table(&report))?;
    write_table(&args.output, "verdict", &verdict_table(&verdict))?;

    for c in &verdict.checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{status}  {:22}  value={}", c.name, fmt_sig12(c.value));
    }
    Ok(if args.enforce && !verdict.all_pass() {
        2
    } else {
        0
    })
}
