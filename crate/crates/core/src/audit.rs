//! Secrecy, uniformity and recoverability audits of a protocol run on a
//! source, either by exhaustive enumeration of blocks or by sampling.
//!
//! Both audits accumulate a weighted joint table of
//! `(K_S, K_P, F, Z-view)` together with per-terminal disagreement mass, then
//! derive every report field from that table. Enumeration and sampling are
//! split into fixed-size chunks that are merged in index order, so reports
//! do not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{run, Protocol, ProtocolError, Terminal};
use crate::region::RatePair;
use crate::source::{CellSampler, JointPmf3, SampleBlock};
use crate::util::{entropy_bits, KahanSum};

/// Default cap on `(|X|·|Y|·|Z|)^n` for [`exact_audit`].
pub const DEFAULT_STATE_BUDGET: u64 = 1 << 22;

const CHUNK: u64 = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuditError {
    #[error("exact audit would enumerate {states} states, budget is {budget}")]
    StateSpaceTooLarge { states: f64, budget: u64 },
    #[error("protocol blocklength {protocol} does not fit the audit")]
    BadBlocklength { protocol: usize },
    #[error("monte carlo audit needs at least one trial")]
    ZeroTrials,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditMode {
    Exact,
    MonteCarlo,
}

impl fmt::Display for AuditMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuditMode::Exact => "exact",
            AuditMode::MonteCarlo => "monte_carlo",
        })
    }
}

/// Every quantity of the ε-(SK, PK) definition for one protocol and source.
/// Rates are in bits per source symbol.
///
/// In monte-carlo mode `pk_leak_rate` is computed against Z's helper view
/// instead of raw `Z^n` and is therefore a lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecrecyReport {
    pub n: usize,
    pub mode: AuditMode,
    pub trials: Option<u64>,
    pub sk_error: f64,
    pub pk_error: f64,
    pub sk_leak_rate: f64,
    pub pk_leak_rate: f64,
    pub sk_unif_deficit: f64,
    pub pk_unif_deficit: f64,
    pub cross_key_rate: f64,
    pub achieved_sk_rate: f64,
    pub achieved_pk_rate: f64,
}

impl SecrecyReport {
    /// Field names and values in serialization order (mode and trials excluded).
    pub fn numeric_fields(&self) -> [(&'static str, f64); 9] {
        [
            ("sk_error", self.sk_error),
            ("pk_error", self.pk_error),
            ("sk_leak_rate", self.sk_leak_rate),
            ("pk_leak_rate", self.pk_leak_rate),
            ("sk_unif_deficit", self.sk_unif_deficit),
            ("pk_unif_deficit", self.pk_unif_deficit),
            ("cross_key_rate", self.cross_key_rate),
            ("achieved_sk_rate", self.achieved_sk_rate),
            ("achieved_pk_rate", self.achieved_pk_rate),
        ]
    }

    /// Largest of the error, leak and deficit fields.
    pub fn worst_epsilon(&self) -> f64 {
        [
            self.sk_error,
            self.pk_error,
            self.sk_leak_rate,
            self.pk_leak_rate,
            self.sk_unif_deficit,
            self.pk_unif_deficit,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

type JointKey = (u64, u64, Vec<u64>, Vec<u64>);

#[derive(Default)]
struct Tally {
    joint: BTreeMap<JointKey, KahanSum>,
    total: KahanSum,
    sk_miss: [KahanSum; 3],
    pk_miss: [KahanSum; 2],
}

impl Tally {
    fn record(&mut self, weight: f64, outcome_view: (crate::protocol::ProtocolOutcome, Vec<u64>)) {
        let (outcome, view) = outcome_view;
        let (ks, kp) = (outcome.reference_sk(), outcome.reference_pk());
        for (miss, &est) in self.sk_miss.iter_mut().zip(&outcome.sk_estimates) {
            if est != ks {
                miss.add(weight);
            }
        }
        for (miss, &est) in self.pk_miss.iter_mut().zip(&outcome.pk_estimates) {
            if est != kp {
                miss.add(weight);
            }
        }
        self.total.add(weight);
        self.joint
            .entry((ks, kp, outcome.transcript.payloads(), view))
            .or_default()
            .add(weight);
    }

    fn merge(&mut self, other: Tally) {
        for (key, mass) in other.joint {
            self.joint.entry(key).or_default().merge(&mass);
        }
        self.total.merge(&other.total);
        for (a, b) in self.sk_miss.iter_mut().zip(&other.sk_miss) {
            a.merge(b);
        }
        for (a, b) in self.pk_miss.iter_mut().zip(&other.pk_miss) {
            a.merge(b);
        }
    }

    fn entropy_of<K: Ord>(&self, key: impl Fn(&JointKey) -> K) -> f64 {
        let total = self.total.value();
        let mut marginal: BTreeMap<K, KahanSum> = BTreeMap::new();
        for (k, mass) in &self.joint {
            marginal.entry(key(k)).or_default().add(mass.value());
        }
        entropy_bits(marginal.values().map(|m| m.value() / total))
    }

    fn report(&self, protocol: &Protocol, mode: AuditMode, trials: Option<u64>) -> SecrecyReport {
        let n = protocol.n() as f64;
        let total = self.total.value();
        let prob = |s: &KahanSum| (s.value() / total).clamp(0.0, 1.0);
        let rate = |bits: f64| (bits / n).max(0.0);

        let h_ks = self.entropy_of(|k| k.0);
        let h_kp = self.entropy_of(|k| k.1);
        let h_f = self.entropy_of(|k| k.2.clone());
        let h_ks_f = self.entropy_of(|k| (k.0, k.2.clone()));
        let h_fz = self.entropy_of(|k| (k.2.clone(), k.3.clone()));
        let h_kp_fz = self.entropy_of(|k| (k.1, k.2.clone(), k.3.clone()));
        let h_ks_kp = self.entropy_of(|k| (k.0, k.1));

        SecrecyReport {
            n: protocol.n(),
            mode,
            trials,
            sk_error: self.sk_miss.iter().map(prob).fold(0.0, f64::max),
            pk_error: self.pk_miss.iter().map(prob).fold(0.0, f64::max),
            sk_leak_rate: rate(h_ks + h_f - h_ks_f),
            pk_leak_rate: rate(h_kp + h_fz - h_kp_fz),
            sk_unif_deficit: rate((protocol.sk_range() as f64).log2() - h_ks),
            pk_unif_deficit: rate((protocol.pk_range() as f64).log2() - h_kp),
            cross_key_rate: rate(h_ks + h_kp - h_ks_kp),
            achieved_sk_rate: rate(h_ks),
            achieved_pk_rate: rate(h_kp),
        }
    }
}

fn execute(
    protocol: &Protocol,
    block: &SampleBlock,
    raw_z: bool,
) -> Result<(crate::protocol::ProtocolOutcome, Vec<u64>), ProtocolError> {
    let outcome = run(protocol, block)?;
    let view = if raw_z {
        block.zs.iter().map(|&s| s as u64).collect()
    } else {
        protocol.helper_view(block.sequence(Terminal::Z), &outcome.transcript.payloads())
    };
    Ok((outcome, view))
}

/// Exact audit with the default state budget.
pub fn exact_audit(protocol: &Protocol, pmf: &JointPmf3) -> Result<SecrecyReport, AuditError> {
    exact_audit_with_budget(protocol, pmf, DEFAULT_STATE_BUDGET)
}

/// Enumerate every block of length `n` with its product-law probability.
/// Zero-probability blocks are skipped.
pub fn exact_audit_with_budget(
    protocol: &Protocol,
    pmf: &JointPmf3,
    budget: u64,
) -> Result<SecrecyReport, AuditError> {
    let n = protocol.n();
    let states = (pmf.cells() as f64).powi(n as i32);
    if states > budget as f64 {
        return Err(AuditError::StateSpaceTooLarge { states, budget });
    }
    let support: Vec<usize> = (0..pmf.cells()).filter(|&c| pmf.probs()[c] > 0.0).collect();
    let base = support.len() as u64;
    let count = base
        .checked_pow(n as u32)
        .ok_or(AuditError::BadBlocklength { protocol: n })?;

    let chunks = count.div_ceil(CHUNK);
    let partials: Vec<Result<Tally, ProtocolError>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut tally = Tally::default();
            let mut block = SampleBlock::new(vec![0; n], vec![0; n], vec![0; n]);
            for index in chunk * CHUNK..((chunk + 1) * CHUNK).min(count) {
                let mut rest = index;
                let mut weight = 1.0;
                for t in (0..n).rev() {
                    let cell = support[(rest % base) as usize];
                    rest /= base;
                    let [x, y, z] = pmf.cell_symbols(cell);
                    block.xs[t] = x;
                    block.ys[t] = y;
                    block.zs[t] = z;
                    weight *= pmf.probs()[cell];
                }
                tally.record(weight, execute(protocol, &block, true)?);
            }
            Ok(tally)
        })
        .collect();

    let mut tally = Tally::default();
    for partial in partials {
        tally.merge(partial?);
    }
    Ok(tally.report(protocol, AuditMode::Exact, None))
}

/// Plug-in estimates from `trials` sampled blocks; trial `t` uses seed
/// `seed + t`.
pub fn mc_audit(
    protocol: &Protocol,
    pmf: &JointPmf3,
    trials: u64,
    seed: u64,
) -> Result<SecrecyReport, AuditError> {
    if trials == 0 {
        return Err(AuditError::ZeroTrials);
    }
    let sampler = CellSampler::new(pmf);
    let n = protocol.n();
    let chunks = trials.div_ceil(CHUNK);
    let partials: Vec<Result<Tally, ProtocolError>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut tally = Tally::default();
            for t in chunk * CHUNK..((chunk + 1) * CHUNK).min(trials) {
                let block = sampler.block(n, seed.wrapping_add(t));
                tally.record(1.0, execute(protocol, &block, false)?);
            }
            Ok(tally)
        })
        .collect();
    let mut tally = Tally::default();
    for partial in partials {
        tally.merge(partial?);
    }
    Ok(tally.report(protocol, AuditMode::MonteCarlo, Some(trials)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub value: f64,
    /// `value - eps`; the condition holds iff this is ≤ 0.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceVerdict {
    pub eps: f64,
    pub checks: Vec<ConditionCheck>,
}

impl ComplianceVerdict {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Test the four ε-(SK, PK) conditions with one shared threshold. The
/// secrecy/uniformity pairs use the larger of the two quantities.
pub fn check_definition(report: &SecrecyReport, eps: f64) -> ComplianceVerdict {
    let check = |name: &str, value: f64| {
        let margin = value - eps;
        ConditionCheck {
            name: name.to_string(),
            value,
            margin,
            pass: margin <= 0.0,
        }
    };
    ComplianceVerdict {
        eps,
        checks: vec![
            check("sk_recoverability", report.sk_error),
            check("pk_recoverability", report.pk_error),
            check(
                "sk_secrecy_uniformity",
                report.sk_leak_rate.max(report.sk_unif_deficit),
            ),
            check(
                "pk_secrecy_uniformity",
                report.pk_leak_rate.max(report.pk_unif_deficit),
            ),
        ],
    }
}

/// ((1/n) H(K_S), (1/n) H(K_P)).
pub fn achieved_rate_pair(report: &SecrecyReport) -> RatePair {
    RatePair::new(report.achieved_sk_rate, report.achieved_pk_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{
        binning_protocol, example1_pk_protocol, example1_sk_protocol, key_map, time_share,
        view_map, BinningParams, ProtocolDescriptor, ProtocolParts, SlotMap, TerminalKeys,
    };
    use crate::source::{cascade_bsc_source, random_pmf, xor_source};
    use std::sync::Arc;

    fn constant_keys(n: usize, sk_range: u64, pk_range: u64) -> Protocol {
        Protocol::from_parts(ProtocolParts {
            n,
            slots: vec![SlotMap::silent(), SlotMap::silent(), SlotMap::silent()],
            key_maps: [
                key_map(|_, _| TerminalKeys { sk: 0, pk: Some(0) }),
                key_map(|_, _| TerminalKeys { sk: 0, pk: Some(0) }),
                key_map(|_, _| TerminalKeys { sk: 0, pk: None }),
            ],
            sk_range,
            pk_range,
            seed: 0,
            helper_view: view_map(|_, _| Vec::new()),
            descriptor: ProtocolDescriptor::Custom {
                name: "constant".into(),
            },
        })
        .unwrap()
    }

    /// The same protocol run on a source whose symbols were renamed by
    /// `perms`: each terminal first maps its sequence back.
    fn relabeled(p: &Protocol, perms: &[Vec<usize>; 3]) -> Protocol {
        let inverse: Vec<Vec<usize>> = perms
            .iter()
            .map(|perm| {
                let mut inv = vec![0; perm.len()];
                for (old, &new) in perm.iter().enumerate() {
                    inv[new] = old;
                }
                inv
            })
            .collect();
        let back = move |k: usize, own: &[usize]| -> Vec<usize> {
            own.iter().map(|&s| inverse[k][s]).collect()
        };
        let back = Arc::new(back);
        let slots = p
            .slots()
            .iter()
            .enumerate()
            .map(|(i, slot)| {
                let (slot, back) = (slot.clone(), back.clone());
                let k = Terminal::for_slot(i + 1).index() - 1;
                SlotMap::new(slot.alphabet(), move |own, prior| {
                    slot.eval(&back(k, own), prior)
                })
            })
            .collect();
        let keys = |terminal: Terminal| {
            let (p, back) = (p.clone(), back.clone());
            key_map(move |own, payloads| {
                p.keys_at(terminal, &back(terminal.index() - 1, own), payloads)
            })
        };
        let view = {
            let (p, back) = (p.clone(), back.clone());
            view_map(move |z, payloads| p.helper_view(&back(2, z), payloads))
        };
        Protocol::from_parts(ProtocolParts {
            n: p.n(),
            slots,
            key_maps: [keys(Terminal::X), keys(Terminal::Y), keys(Terminal::Z)],
            sk_range: p.sk_range(),
            pk_range: p.pk_range(),
            seed: p.seed(),
            helper_view: view,
            descriptor: ProtocolDescriptor::Custom {
                name: "relabeled".into(),
            },
        })
        .unwrap()
    }

    #[test]
    fn example1_sk_exact() {
        let r = exact_audit(&example1_sk_protocol(), &xor_source()).unwrap();
        assert_eq!(r.sk_error, 0.0);
        assert_eq!(r.sk_leak_rate, 0.0);
        assert_eq!(r.sk_unif_deficit, 0.0);
        assert_eq!(achieved_rate_pair(&r), RatePair::new(0.5, 0.0));
        assert!(check_definition(&r, 1e-6).all_pass());
    }

    #[test]
    fn example1_pk_exact() {
        let r = exact_audit(&example1_pk_protocol(), &xor_source()).unwrap();
        assert_eq!(r.pk_error, 0.0);
        assert_eq!(r.pk_leak_rate, 0.0);
        assert_eq!(r.pk_unif_deficit, 0.0);
        assert_eq!(achieved_rate_pair(&r), RatePair::new(0.0, 1.0));
    }

    #[test]
    fn constant_key_reports() {
        let pmf = cascade_bsc_source(0.2, 0.1).unwrap();
        let r = exact_audit(&constant_keys(2, 1, 1), &pmf).unwrap();
        assert_eq!(r.numeric_fields().iter().map(|f| f.1).sum::<f64>(), 0.0);
        assert!(check_definition(&r, 1.0).all_pass());
        let wide = exact_audit(&constant_keys(2, 4, 8), &pmf).unwrap();
        assert_eq!(wide.sk_unif_deficit, 1.0);
        assert_eq!(wide.pk_unif_deficit, 1.5);
        assert_eq!(wide.sk_leak_rate, 0.0);
    }

    #[test]
    fn verdict_margins() {
        let mut r = exact_audit(&constant_keys(1, 1, 1), &xor_source()).unwrap();
        r.sk_leak_rate = 0.2;
        let v = check_definition(&r, 0.1);
        let eq1 = v.check("sk_secrecy_uniformity").unwrap();
        assert!(!eq1.pass);
        assert!((eq1.margin - 0.1).abs() < 1e-15);
        assert!(v.check("pk_secrecy_uniformity").unwrap().pass);
        assert!(v.checks.iter().all(|c| c.pass == (c.margin <= 0.0)));
    }

    #[test]
    fn example1_sk_off_source_is_imperfect() {
        let r = exact_audit(
            &example1_sk_protocol(),
            &cascade_bsc_source(0.25, 0.1).unwrap(),
        )
        .unwrap();
        assert!(r.sk_error > 0.0);
        assert!(!check_definition(&r, 1e-9).all_pass());
    }

    #[test]
    fn state_budget() {
        let p = time_share(&example1_sk_protocol(), &example1_sk_protocol(), 6, 6).unwrap();
        assert!(matches!(
            exact_audit(&p, &xor_source()),
            Err(AuditError::StateSpaceTooLarge { .. })
        ));
        assert!(matches!(
            mc_audit(&p, &xor_source(), 0, 1),
            Err(AuditError::ZeroTrials)
        ));
    }

    #[test]
    fn mc_example1_sk_is_exactly_perfect() {
        let r = mc_audit(&example1_sk_protocol(), &xor_source(), 10_000, 42).unwrap();
        assert_eq!(r.sk_error, 0.0);
        assert_eq!(r.mode, AuditMode::MonteCarlo);
        assert_eq!(r.trials, Some(10_000));
    }

    #[test]
    fn mc_single_trial_is_degenerate() {
        let r = mc_audit(&example1_pk_protocol(), &xor_source(), 1, 5).unwrap();
        assert_eq!(r.achieved_pk_rate, 0.0);
        assert_eq!(r.pk_leak_rate, 0.0);
        assert_eq!(r.cross_key_rate, 0.0);
    }

    #[test]
    fn mc_matches_exact_for_example1_pk() {
        let p = example1_pk_protocol();
        let exact = exact_audit(&p, &xor_source()).unwrap();
        let mc = mc_audit(&p, &xor_source(), 100_000, 7).unwrap();
        for ((name, e), (_, m)) in exact.numeric_fields().iter().zip(mc.numeric_fields()) {
            assert!((e - m).abs() <= 0.02, "{name}: exact {e} vs mc {m}");
        }
    }

    #[test]
    fn timeshare_cross_key_is_zero() {
        let p = time_share(&example1_sk_protocol(), &example1_pk_protocol(), 1, 2).unwrap();
        let r = exact_audit(&p, &xor_source()).unwrap();
        assert_eq!(r.cross_key_rate, 0.0);
        assert_eq!(achieved_rate_pair(&r), RatePair::new(0.25, 0.5));
    }

    #[test]
    fn exact_audit_sanity_on_random_sources() {
        for seed in 0..10 {
            let pmf = random_pmf([2, 2, 2], seed).unwrap();
            for p in [
                example1_sk_protocol(),
                time_share(&example1_sk_protocol(), &example1_pk_protocol(), 1, 1).unwrap(),
            ] {
                let r = exact_audit(&p, &pmf).unwrap();
                assert!(r.sk_leak_rate <= r.achieved_sk_rate + 1e-10);
                assert!(r.achieved_sk_rate * r.n as f64 <= (p.sk_range() as f64).log2() + 1e-10);
                assert!((0.0..=1.0).contains(&r.sk_error));
            }
        }
    }

    #[test]
    fn reports_are_bit_reproducible_across_thread_counts() {
        let pmf = cascade_bsc_source(0.25, 0.1).unwrap();
        let p = time_share(&example1_sk_protocol(), &example1_pk_protocol(), 2, 2).unwrap();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = single.install(|| exact_audit(&p, &pmf).unwrap());
        let b = many.install(|| exact_audit(&p, &pmf).unwrap());
        assert_eq!(a, b);
        let a = single.install(|| mc_audit(&p, &pmf, 5000, 3).unwrap());
        let b = many.install(|| mc_audit(&p, &pmf, 5000, 3).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn report_json_has_flat_fields() {
        let r = exact_audit(&example1_sk_protocol(), &xor_source()).unwrap();
        let value: serde_json::Value = serde_json::to_value(r).unwrap();
        let obj = value.as_object().unwrap();
        assert_eq!(obj["mode"], "exact");
        for (name, _) in r.numeric_fields() {
            assert!(obj[name].is_number(), "{name}");
        }
        assert!(obj.values().all(|v| !v.is_object() && !v.is_array()));
    }

    #[test]
    fn exact_audit_is_invariant_under_relabeling() {
        let perms = [vec![1, 0], vec![1, 0], vec![0, 1]];
        for pmf in [xor_source(), cascade_bsc_source(0.25, 0.1).unwrap()] {
            for p in [example1_sk_protocol(), example1_pk_protocol()] {
                let a = exact_audit(&p, &pmf).unwrap();
                let b = exact_audit(&relabeled(&p, &perms), &pmf.relabeled(&perms)).unwrap();
                for ((name, x), (_, y)) in a.numeric_fields().iter().zip(b.numeric_fields()) {
                    assert!((x - y).abs() <= 1e-12, "{name}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn binning_on_xor_at_the_omniscience_boundary() {
        // Each helper gets 3 bits about 6 unknown bits, so one spurious
        // candidate survives on average and decoding errs often.
        let pmf = xor_source();
        let params = BinningParams {
            n: 6,
            slack: 0.5,
            sk_rate: 0.25,
            pk_rate: 0.0,
            seed: 1,
        };
        let p = binning_protocol(&pmf, &params).unwrap();
        let exact = exact_audit(&p, &pmf).unwrap();
        assert!(
            exact.sk_error > 0.1 && exact.sk_error < 0.9,
            "{}",
            exact.sk_error
        );
        assert_eq!(exact.pk_error, 0.0);

        let trials = 20_000u64;
        let mc = mc_audit(&p, &pmf, trials, 3).unwrap();
        let e = exact.sk_error;
        let band = 3.0 * (e * (1.0 - e) / trials as f64).sqrt() + 1.0 / trials as f64;
        assert!(
            (mc.sk_error - e).abs() <= band,
            "mc {} exact {e}",
            mc.sk_error
        );
    }
}
