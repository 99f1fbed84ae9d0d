//! Deterministic public-discussion protocols over the slot-indexed broadcast
//! model.
//!
//! Time slot `t` (1-based) belongs to terminal `t mod 3` (X = 1, Y = 2,
//! Z = 3 for `t mod 3 = 0`). A slot map sees only its sender's own sequence
//! and the payloads of strictly earlier slots. After the last slot every
//! terminal applies its key map to its own sequence and the full transcript.
//! Any randomness (binning codebooks, extractors) is fixed by a public seed
//! that is part of the protocol description.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::info::{conditional_entropy, VarSet};
use crate::source::{JointPmf3, SampleBlock};
use crate::util::{ceil_bits, keyed_hash, top_bits};

/// Default cap on the candidate pairs a binning decoder may have to examine.
pub const DEFAULT_SEARCH_BUDGET: u64 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("block has length {got}, protocol expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("slot {slot} produced payload {payload} outside its alphabet of size {alphabet}")]
    PayloadOutOfRange {
        slot: usize,
        payload: u64,
        alphabet: u64,
    },
    #[error("terminal {terminal} produced key {value} outside range {range}")]
    KeyOutOfRange {
        terminal: Terminal,
        value: u64,
        range: u64,
    },
    #[error("terminal {0} did not produce a private key")]
    MissingPrivateKey(Terminal),
    #[error("combined key range overflows 64 bits")]
    RangeOverflow,
    #[error("time sharing needs at least one constituent copy")]
    EmptyComposition,
    #[error("decoder search space of {candidates} candidates exceeds the budget of {budget}")]
    RateInfeasible { candidates: f64, budget: u64 },
    #[error("invalid protocol parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid protocol descriptor: {0}")]
    Descriptor(String),
}

/// One of the three terminals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Terminal {
    X,
    Y,
    Z,
}

impl Terminal {
    pub const ALL: [Terminal; 3] = [Terminal::X, Terminal::Y, Terminal::Z];

    /// 1, 2, 3 for X, Y, Z.
    pub fn index(self) -> usize {
        self as usize + 1
    }

    /// Sender of slot `t` (1-based).
    pub fn for_slot(t: usize) -> Terminal {
        match t % 3 {
            1 => Terminal::X,
            2 => Terminal::Y,
            _ => Terminal::Z,
        }
    }
}

impl fmt::Display for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl SampleBlock {
    pub fn sequence(&self, terminal: Terminal) -> &[usize] {
        match terminal {
            Terminal::X => &self.xs,
            Terminal::Y => &self.ys,
            Terminal::Z => &self.zs,
        }
    }
}

type SlotFn = Arc<dyn Fn(&[usize], &[u64]) -> u64 + Send + Sync>;
type KeyFn = Arc<dyn Fn(&[usize], &[u64]) -> TerminalKeys + Send + Sync>;
type ViewFn = Arc<dyn Fn(&[usize], &[u64]) -> Vec<u64> + Send + Sync>;

/// Deterministic map for one time slot, with its declared payload alphabet.
#[derive(Clone)]
pub struct SlotMap {
    alphabet: u64,
    f: SlotFn,
}

impl SlotMap {
    pub fn new(alphabet: u64, f: impl Fn(&[usize], &[u64]) -> u64 + Send + Sync + 'static) -> Self {
        Self {
            alphabet,
            f: Arc::new(f),
        }
    }

    /// A silent slot: always sends 0 from a one-letter alphabet.
    pub fn silent() -> Self {
        Self::new(1, |_, _| 0)
    }

    pub fn alphabet(&self) -> u64 {
        self.alphabet
    }

    pub fn eval(&self, own: &[usize], prior: &[u64]) -> u64 {
        (self.f)(own, prior)
    }
}

/// Key outputs of one terminal. Only X and Y produce a private key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TerminalKeys {
    pub sk: u64,
    pub pk: Option<u64>,
}

/// Raw ingredients of a [`Protocol`].
pub struct ProtocolParts {
    pub n: usize,
    pub slots: Vec<SlotMap>,
    /// Indexed X, Y, Z.
    pub key_maps: [KeyFn; 3],
    pub sk_range: u64,
    pub pk_range: u64,
    pub seed: u64,
    /// Statistic of Z's view standing in for raw `Z^n` when leakage to Z is
    /// estimated by sampling.
    pub helper_view: ViewFn,
    pub descriptor: ProtocolDescriptor,
}

/// Wrap a key closure for [`ProtocolParts::key_maps`].
pub fn key_map(f: impl Fn(&[usize], &[u64]) -> TerminalKeys + Send + Sync + 'static) -> KeyFn {
    Arc::new(f)
}

/// Wrap a helper-view closure for [`ProtocolParts::helper_view`].
pub fn view_map(f: impl Fn(&[usize], &[u64]) -> Vec<u64> + Send + Sync + 'static) -> ViewFn {
    Arc::new(f)
}

fn raw_sequence_view() -> ViewFn {
    view_map(|z, _| z.iter().map(|&s| s as u64).collect())
}

#[derive(Clone)]
pub struct Protocol {
    n: usize,
    slots: Vec<SlotMap>,
    key_maps: [KeyFn; 3],
    sk_range: u64,
    pk_range: u64,
    seed: u64,
    helper_view: ViewFn,
    descriptor: ProtocolDescriptor,
}

impl fmt::Debug for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Protocol")
            .field("n", &self.n)
            .field("rounds", &self.rounds())
            .field("sk_range", &self.sk_range)
            .field("pk_range", &self.pk_range)
            .field("seed", &self.seed)
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

impl Protocol {
    pub fn from_parts(parts: ProtocolParts) -> Result<Self, ProtocolError> {
        if parts.n == 0 {
            return Err(ProtocolError::InvalidParameter(
                "blocklength must be positive".into(),
            ));
        }
        if !parts.slots.len().is_multiple_of(3) {
            return Err(ProtocolError::InvalidParameter(format!(
                "{} slots do not form whole rounds",
                parts.slots.len()
            )));
        }
        if parts.sk_range == 0 || parts.pk_range == 0 || parts.slots.iter().any(|s| s.alphabet == 0)
        {
            return Err(ProtocolError::InvalidParameter(
                "ranges must be nonempty".into(),
            ));
        }
        Ok(Self {
            n: parts.n,
            slots: parts.slots,
            key_maps: parts.key_maps,
            sk_range: parts.sk_range,
            pk_range: parts.pk_range,
            seed: parts.seed,
            helper_view: parts.helper_view,
            descriptor: parts.descriptor,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rounds(&self) -> usize {
        self.slots.len() / 3
    }

    pub fn slots(&self) -> &[SlotMap] {
        &self.slots
    }

    pub fn sk_range(&self) -> u64 {
        self.sk_range
    }

    pub fn pk_range(&self) -> u64 {
        self.pk_range
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn descriptor(&self) -> &ProtocolDescriptor {
        &self.descriptor
    }

    pub fn keys_at(&self, terminal: Terminal, own: &[usize], payloads: &[u64]) -> TerminalKeys {
        (self.key_maps[terminal.index() - 1])(own, payloads)
    }

    pub fn helper_view(&self, z: &[usize], payloads: &[u64]) -> Vec<u64> {
        (self.helper_view)(z, payloads)
    }

    /// Test hook: slot `t` sends `(payload + 1) mod alphabet` instead.
    pub fn with_corrupted_slot(mut self, t: usize) -> Self {
        if let Some(slot) = t.checked_sub(1).and_then(|i| self.slots.get(i)).cloned() {
            let alphabet = slot.alphabet;
            self.slots[t - 1] = SlotMap::new(alphabet, move |own, prior| {
                (slot.eval(own, prior) + 1) % alphabet
            });
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Message {
    pub slot: usize,
    pub sender: Terminal,
    pub payload: u64,
    pub alphabet: u64,
}

/// The public transcript F = (F_1, ..., F_3r).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub rounds: usize,
    pub messages: Vec<Message>,
}

impl Transcript {
    pub fn payloads(&self) -> Vec<u64> {
        self.messages.iter().map(|m| m.payload).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolOutcome {
    pub transcript: Transcript,
    /// Indexed X, Y, Z.
    pub sk_estimates: [u64; 3],
    /// Indexed X, Y.
    pub pk_estimates: [u64; 2],
}

impl ProtocolOutcome {
    /// Terminal X's secret key, taken as the nominal K_S.
    pub fn reference_sk(&self) -> u64 {
        self.sk_estimates[0]
    }

    /// Terminal X's private key, taken as the nominal K_P.
    pub fn reference_pk(&self) -> u64 {
        self.pk_estimates[0]
    }
}

/// Execute a protocol on one block.
pub fn run(protocol: &Protocol, block: &SampleBlock) -> Result<ProtocolOutcome, ProtocolError> {
    if block.n() != protocol.n {
        return Err(ProtocolError::LengthMismatch {
            expected: protocol.n,
            got: block.n(),
        });
    }
    let mut payloads = Vec::with_capacity(protocol.slots.len());
    let mut messages = Vec::with_capacity(protocol.slots.len());
    for (i, slot) in protocol.slots.iter().enumerate() {
        let t = i + 1;
        let sender = Terminal::for_slot(t);
        let payload = slot.eval(block.sequence(sender), &payloads);
        if payload >= slot.alphabet {
            return Err(ProtocolError::PayloadOutOfRange {
                slot: t,
                payload,
                alphabet: slot.alphabet,
            });
        }
        payloads.push(payload);
        messages.push(Message {
            slot: t,
            sender,
            payload,
            alphabet: slot.alphabet,
        });
    }

    let mut sk_estimates = [0; 3];
    let mut pk_estimates = [0; 2];
    for terminal in Terminal::ALL {
        let keys = protocol.keys_at(terminal, block.sequence(terminal), &payloads);
        if keys.sk >= protocol.sk_range {
            return Err(ProtocolError::KeyOutOfRange {
                terminal,
                value: keys.sk,
                range: protocol.sk_range,
            });
        }
        sk_estimates[terminal.index() - 1] = keys.sk;
        if terminal != Terminal::Z {
            let pk = keys.pk.ok_or(ProtocolError::MissingPrivateKey(terminal))?;
            if pk >= protocol.pk_range {
                return Err(ProtocolError::KeyOutOfRange {
                    terminal,
                    value: pk,
                    range: protocol.pk_range,
                });
            }
            pk_estimates[terminal.index() - 1] = pk;
        }
    }
    Ok(ProtocolOutcome {
        transcript: Transcript {
            rounds: protocol.rounds(),
            messages,
        },
        sk_estimates,
        pk_estimates,
    })
}

/// Two-symbol secret-key scheme for the xor source: X, Y, Z announce X_1,
/// Y_2 and Z_1 xor Z_2; every terminal then recovers X_2, the key.
pub fn example1_sk_protocol() -> Protocol {
    let slots = vec![
        SlotMap::new(2, |x, _| (x[0] & 1) as u64),
        SlotMap::new(2, |y, _| (y[1] & 1) as u64),
        SlotMap::new(2, |z, _| ((z[0] ^ z[1]) & 1) as u64),
    ];
    let keys = |sk: u64| TerminalKeys { sk, pk: Some(0) };
    let key_maps = [
        key_map(move |x, _| keys((x[1] & 1) as u64)),
        // x2 = z2 ^ y2 = (z1 ^ z2) ^ z1 ^ y2, with z1 = x1 ^ y1
        key_map(move |y, f| keys((f[2] ^ f[0] ^ (y[0] ^ y[1]) as u64) & 1)),
        key_map(|z, f| TerminalKeys {
            sk: (z[1] as u64 ^ f[1]) & 1,
            pk: None,
        }),
    ];
    Protocol::from_parts(ProtocolParts {
        n: 2,
        slots,
        key_maps,
        sk_range: 2,
        pk_range: 1,
        seed: 0,
        helper_view: raw_sequence_view(),
        descriptor: ProtocolDescriptor::Example1Sk,
    })
    .expect("well-formed")
}

/// One-symbol private-key scheme for the xor source: Z announces Z_1, X
/// recovers Y_1 = X_1 xor Z_1, which is the key.
pub fn example1_pk_protocol() -> Protocol {
    let slots = vec![
        SlotMap::silent(),
        SlotMap::silent(),
        SlotMap::new(2, |z, _| (z[0] & 1) as u64),
    ];
    let key_maps = [
        key_map(|x, f| TerminalKeys {
            sk: 0,
            pk: Some((x[0] as u64 ^ f[2]) & 1),
        }),
        key_map(|y, _| TerminalKeys {
            sk: 0,
            pk: Some((y[0] & 1) as u64),
        }),
        key_map(|_, _| TerminalKeys { sk: 0, pk: None }),
    ];
    Protocol::from_parts(ProtocolParts {
        n: 1,
        slots,
        key_maps,
        sk_range: 1,
        pk_range: 2,
        seed: 0,
        helper_view: raw_sequence_view(),
        descriptor: ProtocolDescriptor::Example1Pk,
    })
    .expect("well-formed")
}

struct Copy {
    protocol: Protocol,
    block_offset: usize,
    slot_offset: usize,
}

/// Block-concatenate `repeats_a` copies of `a` followed by `repeats_b`
/// copies of `b`. Keys are the tuples of constituent keys, packed in
/// mixed radix with the first copy most significant.
pub fn time_share(
    a: &Protocol,
    b: &Protocol,
    repeats_a: usize,
    repeats_b: usize,
) -> Result<Protocol, ProtocolError> {
    if repeats_a + repeats_b == 0 {
        return Err(ProtocolError::EmptyComposition);
    }
    let mut copies = Vec::with_capacity(repeats_a + repeats_b);
    let (mut block_offset, mut slot_offset) = (0, 0);
    let (mut sk_range, mut pk_range) = (1u64, 1u64);
    let constituents = std::iter::repeat_n(a, repeats_a).chain(std::iter::repeat_n(b, repeats_b));
    for p in constituents {
        sk_range = sk_range
            .checked_mul(p.sk_range)
            .ok_or(ProtocolError::RangeOverflow)?;
        pk_range = pk_range
            .checked_mul(p.pk_range)
            .ok_or(ProtocolError::RangeOverflow)?;
        copies.push(Copy {
            protocol: p.clone(),
            block_offset,
            slot_offset,
        });
        block_offset += p.n;
        slot_offset += p.slots.len();
    }
    let n = block_offset;

    let mut slots = Vec::with_capacity(slot_offset);
    for c in &copies {
        let (boff, soff, len) = (c.block_offset, c.slot_offset, c.protocol.n);
        for slot in &c.protocol.slots {
            let inner = slot.clone();
            slots.push(SlotMap::new(slot.alphabet, move |own, prior| {
                inner.eval(&own[boff..boff + len], &prior[soff..])
            }));
        }
    }

    let copies = Arc::new(copies);
    let key_for = |terminal: Terminal| {
        let copies = Arc::clone(&copies);
        key_map(move |own, payloads| {
            let mut sk = 0u64;
            let mut pk = Some(0u64);
            for c in copies.iter() {
                let p = &c.protocol;
                let keys = p.keys_at(
                    terminal,
                    &own[c.block_offset..c.block_offset + p.n],
                    &payloads[c.slot_offset..c.slot_offset + p.slots.len()],
                );
                sk = sk * p.sk_range + keys.sk;
                pk = match (pk, keys.pk) {
                    (Some(acc), Some(k)) => Some(acc * p.pk_range + k),
                    _ => None,
                };
            }
            TerminalKeys {
                sk,
                pk: if terminal == Terminal::Z { None } else { pk },
            }
        })
    };
    let key_maps = [
        key_for(Terminal::X),
        key_for(Terminal::Y),
        key_for(Terminal::Z),
    ];
    let view_copies = Arc::clone(&copies);
    let helper_view = view_map(move |z, payloads| {
        let mut out = Vec::new();
        for c in view_copies.iter() {
            let p = &c.protocol;
            out.extend(p.helper_view(
                &z[c.block_offset..c.block_offset + p.n],
                &payloads[c.slot_offset..c.slot_offset + p.slots.len()],
            ));
        }
        out
    });
    Protocol::from_parts(ProtocolParts {
        n,
        slots,
        key_maps,
        sk_range,
        pk_range,
        seed: a.seed,
        helper_view,
        descriptor: ProtocolDescriptor::Timeshare {
            a: Box::new(a.descriptor.clone()),
            b: Box::new(b.descriptor.clone()),
            repeats_a,
            repeats_b,
        },
    })
}

/// Parameters of the single-round binning protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BinningParams {
    pub n: usize,
    /// Extra bits per symbol on top of each terminal's conditional entropy.
    pub slack: f64,
    pub sk_rate: f64,
    pub pk_rate: f64,
    pub seed: u64,
}

impl BinningParams {
    pub fn sk_bits(&self) -> u32 {
        ceil_bits(self.n as f64 * self.sk_rate)
    }

    pub fn pk_bits(&self) -> u32 {
        ceil_bits(self.n as f64 * self.pk_rate)
    }
}

const DOMAIN_BIN: u64 = 0x6269_6e00;
const DOMAIN_SK: u64 = 0x736b;
const DOMAIN_PK: u64 = 0x706b;

/// Bin assignment for one terminal's sequences.
struct BinCode {
    card: usize,
    count: u64,
    bits: u32,
    /// Only one possible sequence; nothing to hash.
    single_sequence: bool,
    /// (bin, sequence index), sorted; empty when single_sequence.
    table: Vec<(u64, u64)>,
}

impl BinCode {
    fn alphabet(&self) -> u64 {
        if self.single_sequence {
            self.count
        } else {
            1u64 << self.bits
        }
    }

    fn bin(&self, seed: u64, domain: u64, index: u64) -> u64 {
        if self.single_sequence {
            index
        } else {
            top_bits(keyed_hash(seed, domain, &[index]), self.bits)
        }
    }

    fn candidates(&self, bin: u64) -> Vec<u64> {
        if self.single_sequence {
            return if bin < self.count {
                vec![bin]
            } else {
                Vec::new()
            };
        }
        let lo = self.table.partition_point(|&(b, _)| b < bin);
        let hi = self.table.partition_point(|&(b, _)| b <= bin);
        self.table[lo..hi].iter().map(|&(_, i)| i).collect()
    }
}

fn sequence_index(seq: &[usize], card: usize) -> u64 {
    seq.iter()
        .fold(0u64, |acc, &s| acc * card as u64 + s as u64)
}

fn sequence_symbols(mut index: u64, card: usize, n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for slot in out.iter_mut().rev() {
        *slot = (index % card as u64) as usize;
        index /= card as u64;
    }
    out
}

struct Codebook {
    n: usize,
    seed: u64,
    pmf: JointPmf3,
    codes: [BinCode; 3],
    sk_bits: u32,
    pk_bits: u32,
}

impl Codebook {
    fn bin_of(&self, k: usize, seq: &[usize]) -> u64 {
        let code = &self.codes[k];
        code.bin(
            self.seed,
            DOMAIN_BIN + k as u64,
            sequence_index(seq, code.card),
        )
    }

    /// Most likely pair of the other two sequences given terminal `k`'s own
    /// sequence and the announced bins; ties go to the lexicographically
    /// smallest pair. Returns sequence indices in X, Y, Z order.
    fn decode(&self, k: usize, own: &[usize], bins: &[u64]) -> [u64; 3] {
        let others: [usize; 2] = match k {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        let expand = |j: usize| -> Vec<(u64, Vec<usize>)> {
            self.codes[j]
                .candidates(bins[j])
                .into_iter()
                .map(|i| (i, sequence_symbols(i, self.codes[j].card, self.n)))
                .collect()
        };
        let first = expand(others[0]);
        let second = expand(others[1]);

        let mut best: Option<(f64, u64, u64)> = None;
        let mut cell = [0usize; 3];
        for (i1, s1) in &first {
            for (i2, s2) in &second {
                let mut likelihood = 1.0;
                for t in 0..self.n {
                    cell[k] = own[t];
                    cell[others[0]] = s1[t];
                    cell[others[1]] = s2[t];
                    likelihood *= self.pmf.prob(cell[0], cell[1], cell[2]);
                    if likelihood == 0.0 {
                        break;
                    }
                }
                if best.is_none_or(|(b, _, _)| likelihood > b) {
                    best = Some((likelihood, *i1, *i2));
                }
            }
        }
        let (i1, i2) = best.map_or((0, 0), |(_, a, b)| (a, b));
        let mut out = [0u64; 3];
        out[k] = sequence_index(own, self.codes[k].card);
        out[others[0]] = i1;
        out[others[1]] = i2;
        out
    }

    fn secret_key(&self, seqs: &[u64; 3]) -> u64 {
        top_bits(keyed_hash(self.seed, DOMAIN_SK, seqs), self.sk_bits)
    }

    fn private_key(&self, seqs: &[u64; 3]) -> u64 {
        top_bits(keyed_hash(self.seed, DOMAIN_PK, &seqs[..2]), self.pk_bits)
    }
}

fn checked_pow(base: usize, exp: usize) -> Option<u64> {
    (base as u64).checked_pow(u32::try_from(exp).ok()?)
}

/// Single-round random-binning protocol with the default search budget.
pub fn binning_protocol(
    pmf: &JointPmf3,
    params: &BinningParams,
) -> Result<Protocol, ProtocolError> {
    binning_protocol_with_budget(pmf, params, DEFAULT_SEARCH_BUDGET)
}

/// Each terminal announces a seeded hash bin of its whole sequence at rate
/// `H(own | other two) + slack`; every terminal then decodes the other two
/// sequences by maximum likelihood and hashes the reconstruction into the
/// keys.
pub fn binning_protocol_with_budget(
    pmf: &JointPmf3,
    params: &BinningParams,
    budget: u64,
) -> Result<Protocol, ProtocolError> {
    let BinningParams {
        n,
        slack,
        sk_rate,
        pk_rate,
        seed,
    } = *params;
    if n == 0 {
        return Err(ProtocolError::InvalidParameter(
            "blocklength must be positive".into(),
        ));
    }
    if slack.is_nan() || slack <= 0.0 {
        return Err(ProtocolError::InvalidParameter(format!(
            "slack must be positive, got {slack}"
        )));
    }
    if !(sk_rate >= 0.0 && pk_rate >= 0.0) {
        return Err(ProtocolError::InvalidParameter(
            "key rates must be nonnegative".into(),
        ));
    }
    let (sk_bits, pk_bits) = (params.sk_bits(), params.pk_bits());
    if sk_bits > 63 || pk_bits > 63 {
        return Err(ProtocolError::InvalidParameter(
            "keys are limited to 63 bits".into(),
        ));
    }

    let card = pmf.card();
    let counts: Vec<Option<u64>> = card.iter().map(|&c| checked_pow(c, n)).collect();
    let worst = [(1, 2), (0, 2), (0, 1)]
        .iter()
        .map(|&(i, j)| match (counts[i], counts[j]) {
            (Some(a), Some(b)) => a as f64 * b as f64,
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max);
    if worst > budget as f64 {
        return Err(ProtocolError::RateInfeasible {
            candidates: worst,
            budget,
        });
    }

    let own_given_rest = [
        (VarSet::X, VarSet::YZ),
        (VarSet::Y, VarSet::XZ),
        (VarSet::Z, VarSet::XY),
    ];
    let codes: Vec<BinCode> = own_given_rest
        .iter()
        .enumerate()
        .map(|(k, &(target, given))| {
            let rate = conditional_entropy(pmf, target, given)
                .expect("fixed disjoint variable sets")
                + slack;
            let count = counts[k].expect("checked against budget");
            let bits = ceil_bits(n as f64 * rate).min(63);
            let single_sequence = count == 1;
            let mut code = BinCode {
                card: card[k],
                count,
                bits,
                single_sequence,
                table: Vec::new(),
            };
            if !single_sequence {
                let mut table: Vec<(u64, u64)> = (0..count)
                    .map(|i| (code.bin(seed, DOMAIN_BIN + k as u64, i), i))
                    .collect();
                table.sort_unstable();
                code.table = table;
            }
            code
        })
        .collect();
    let codes: [BinCode; 3] = codes.try_into().unwrap_or_else(|_| unreachable!());
    let book = Arc::new(Codebook {
        n,
        seed,
        pmf: pmf.clone(),
        codes,
        sk_bits,
        pk_bits,
    });

    let slots = (0..3)
        .map(|k| {
            let book = Arc::clone(&book);
            SlotMap::new(book.codes[k].alphabet(), move |own, _| book.bin_of(k, own))
        })
        .collect();
    let key_for = |k: usize| {
        let book = Arc::clone(&book);
        key_map(move |own, bins| {
            let seqs = book.decode(k, own, bins);
            TerminalKeys {
                sk: book.secret_key(&seqs),
                pk: (k < 2).then(|| book.private_key(&seqs)),
            }
        })
    };
    let key_maps = [key_for(0), key_for(1), key_for(2)];
    let view_book = Arc::clone(&book);
    let helper_view = view_map(move |z, bins| {
        let seqs = view_book.decode(2, z, bins);
        vec![view_book.private_key(&seqs)]
    });

    Protocol::from_parts(ProtocolParts {
        n,
        slots,
        key_maps,
        sk_range: 1u64 << sk_bits,
        pk_range: 1u64 << pk_bits,
        seed,
        helper_view,
        descriptor: ProtocolDescriptor::Binning(*params),
    })
}

/// Serializable description of a protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProtocolDescriptor {
    Example1Sk,
    Example1Pk,
    Binning(BinningParams),
    Timeshare {
        a: Box<ProtocolDescriptor>,
        b: Box<ProtocolDescriptor>,
        #[serde(rename = "repeatsA")]
        repeats_a: usize,
        #[serde(rename = "repeatsB")]
        repeats_b: usize,
    },
    /// Hand-assembled protocol with no serializable construction.
    Custom {
        name: String,
    },
}

impl ProtocolDescriptor {
    pub fn from_json(text: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(text).map_err(|e| ProtocolError::Descriptor(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("descriptor serializes")
    }

    /// Instantiate; binning protocols need the source for their rates and decoder.
    pub fn build(&self, pmf: &JointPmf3) -> Result<Protocol, ProtocolError> {
        match self {
            ProtocolDescriptor::Example1Sk => Ok(example1_sk_protocol()),
            ProtocolDescriptor::Example1Pk => Ok(example1_pk_protocol()),
            ProtocolDescriptor::Binning(params) => binning_protocol(pmf, params),
            ProtocolDescriptor::Timeshare {
                a,
                b,
                repeats_a,
                repeats_b,
            } => time_share(&a.build(pmf)?, &b.build(pmf)?, *repeats_a, *repeats_b),
            ProtocolDescriptor::Custom { name } => Err(ProtocolError::Descriptor(format!(
                "custom protocol {name:?} cannot be rebuilt from its descriptor"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::{cascade_bsc_source, point_mass, sample_iid, xor_source};

    fn block(xs: &[usize], ys: &[usize], zs: &[usize]) -> SampleBlock {
        SampleBlock::new(xs.to_vec(), ys.to_vec(), zs.to_vec())
    }

    fn xor_support_blocks(n: usize) -> Vec<SampleBlock> {
        (0..1u64 << (2 * n))
            .map(|bits| {
                let xs: Vec<usize> = (0..n).map(|i| ((bits >> (2 * i)) & 1) as usize).collect();
                let ys: Vec<usize> = (0..n)
                    .map(|i| ((bits >> (2 * i + 1)) & 1) as usize)
                    .collect();
                let zs = xs.iter().zip(&ys).map(|(x, y)| x ^ y).collect();
                SampleBlock::new(xs, ys, zs)
            })
            .collect()
    }

    #[test]
    fn sender_law() {
        assert_eq!(Terminal::for_slot(1), Terminal::X);
        assert_eq!(Terminal::for_slot(2), Terminal::Y);
        assert_eq!(Terminal::for_slot(3), Terminal::Z);
        assert_eq!(Terminal::for_slot(6), Terminal::Z);
        assert_eq!(Terminal::for_slot(7), Terminal::X);
    }

    #[test]
    fn example1_sk_by_hand() {
        let p = example1_sk_protocol();
        assert_eq!(
            (p.n(), p.rounds(), p.sk_range(), p.pk_range()),
            (2, 1, 2, 1)
        );
        let out = run(&p, &block(&[0, 1], &[1, 0], &[1, 1])).unwrap();
        assert_eq!(out.transcript.payloads(), vec![0, 0, 0]);
        assert_eq!(out.sk_estimates, [1, 1, 1]);
        let out = run(&p, &block(&[0, 0], &[0, 0], &[0, 0])).unwrap();
        assert_eq!(out.transcript.payloads(), vec![0, 0, 0]);
        assert_eq!(out.sk_estimates, [0, 0, 0]);
    }

    #[test]
    fn example1_pk_by_hand() {
        let p = example1_pk_protocol();
        let out = run(&p, &block(&[1], &[0], &[1])).unwrap();
        assert_eq!(out.transcript.payloads(), vec![0, 0, 1]);
        assert_eq!(out.pk_estimates, [0, 0]);
        let out = run(&p, &block(&[0], &[0], &[0])).unwrap();
        assert_eq!(out.reference_pk(), 0);
    }

    #[test]
    fn example1_schemes_are_perfect_on_support() {
        let sk = example1_sk_protocol();
        for b in xor_support_blocks(2) {
            let out = run(&sk, &b).unwrap();
            assert!(out.sk_estimates.iter().all(|&k| k == b.xs[1] as u64));
        }
        let pk = example1_pk_protocol();
        for b in xor_support_blocks(1) {
            let out = run(&pk, &b).unwrap();
            assert_eq!(out.pk_estimates, [b.ys[0] as u64; 2]);
        }
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            run(&example1_sk_protocol(), &block(&[0], &[0], &[0])),
            Err(ProtocolError::LengthMismatch {
                expected: 2,
                got: 1
            })
        );
    }

    #[test]
    fn constant_protocol() {
        let p = Protocol::from_parts(ProtocolParts {
            n: 3,
            slots: vec![SlotMap::silent(), SlotMap::silent(), SlotMap::silent()],
            key_maps: [
                key_map(|x, _| TerminalKeys {
                    sk: x[0] as u64,
                    pk: Some(x[2] as u64),
                }),
                key_map(|y, _| TerminalKeys {
                    sk: y[0] as u64,
                    pk: Some(0),
                }),
                key_map(|_, _| TerminalKeys { sk: 1, pk: None }),
            ],
            sk_range: 2,
            pk_range: 2,
            seed: 0,
            helper_view: view_map(|_, _| Vec::new()),
            descriptor: ProtocolDescriptor::Custom {
                name: "constant".into(),
            },
        })
        .unwrap();
        let out = run(&p, &block(&[1, 0, 1], &[0, 0, 0], &[1, 1, 1])).unwrap();
        assert_eq!(out.transcript.payloads(), vec![0, 0, 0]);
        assert_eq!(out.sk_estimates, [1, 0, 1]);
        assert_eq!(out.pk_estimates, [1, 0]);
    }

    #[test]
    fn out_of_range_outputs_are_rejected() {
        let bad_payload = Protocol::from_parts(ProtocolParts {
            n: 1,
            slots: vec![
                SlotMap::new(1, |_, _| 3),
                SlotMap::silent(),
                SlotMap::silent(),
            ],
            key_maps: [
                key_map(|_, _| TerminalKeys { sk: 0, pk: Some(0) }),
                key_map(|_, _| TerminalKeys { sk: 0, pk: None }),
                key_map(|_, _| TerminalKeys { sk: 0, pk: None }),
            ],
            sk_range: 1,
            pk_range: 1,
            seed: 0,
            helper_view: view_map(|_, _| Vec::new()),
            descriptor: ProtocolDescriptor::Custom { name: "bad".into() },
        })
        .unwrap();
        let b = block(&[0], &[0], &[0]);
        assert!(matches!(
            run(&bad_payload, &b),
            Err(ProtocolError::PayloadOutOfRange { slot: 1, .. })
        ));
        let fixed = bad_payload.clone();
        let mut parts_slots = fixed.slots().to_vec();
        parts_slots[0] = SlotMap::silent();
        let missing_pk = Protocol::from_parts(ProtocolParts {
            n: 1,
            slots: parts_slots,
            key_maps: fixed.key_maps.clone(),
            sk_range: 1,
            pk_range: 1,
            seed: 0,
            helper_view: view_map(|_, _| Vec::new()),
            descriptor: ProtocolDescriptor::Custom { name: "bad".into() },
        })
        .unwrap();
        assert_eq!(
            run(&missing_pk, &b),
            Err(ProtocolError::MissingPrivateKey(Terminal::Y))
        );
    }

    #[test]
    fn causality_under_perturbation() {
        let p = time_share(&example1_sk_protocol(), &example1_pk_protocol(), 1, 1).unwrap();
        let pmf = xor_source();
        for seed in 0..50 {
            let b = sample_iid(&pmf, p.n(), seed).unwrap();
            let base = run(&p, &b).unwrap().transcript.payloads();
            // Changing Z's input only affects slots sent by Z or later.
            let mut changed = b.clone();
            changed.zs[0] ^= 1;
            let after = run(&p, &changed).unwrap().transcript.payloads();
            assert_eq!(base[..2], after[..2]);
        }
    }

    #[test]
    fn runs_are_deterministic_and_obey_sender_law() {
        let pmf = cascade_bsc_source(0.25, 0.1).unwrap();
        let p = binning_protocol(
            &pmf,
            &BinningParams {
                n: 4,
                slack: 0.35,
                sk_rate: 0.1,
                pk_rate: 0.2,
                seed: 11,
            },
        )
        .unwrap();
        for seed in 0..20 {
            let b = sample_iid(&pmf, 4, seed).unwrap();
            let first = run(&p, &b).unwrap();
            assert_eq!(first, run(&p, &b).unwrap());
            for m in &first.transcript.messages {
                assert_eq!(
                    m.sender.index(),
                    if m.slot % 3 == 0 { 3 } else { m.slot % 3 }
                );
            }
        }
    }

    #[test]
    fn time_share_shapes() {
        let sk = example1_sk_protocol();
        let pk = example1_pk_protocol();
        let mix = time_share(&sk, &pk, 1, 2).unwrap();
        assert_eq!(
            (mix.n(), mix.rounds(), mix.sk_range(), mix.pk_range()),
            (4, 3, 2, 4)
        );
        let double = time_share(&sk, &sk, 1, 1).unwrap();
        assert_eq!((double.n(), double.sk_range()), (4, 4));
        assert_eq!(
            time_share(&sk, &pk, 0, 0).unwrap_err(),
            ProtocolError::EmptyComposition
        );

        let same = time_share(&sk, &pk, 1, 0).unwrap();
        for b in xor_support_blocks(2) {
            assert_eq!(run(&same, &b).unwrap(), run(&sk, &b).unwrap());
        }
    }

    #[test]
    fn time_share_keys_are_tuples() {
        let mix = time_share(&example1_sk_protocol(), &example1_pk_protocol(), 1, 2).unwrap();
        // blocks: sk copy (x=(0,1),y=(1,0)), pk copies (x=1,y=0), (x=1,y=1)
        let b = block(&[0, 1, 1, 1], &[1, 0, 0, 1], &[1, 1, 1, 0]);
        let out = run(&mix, &b).unwrap();
        assert_eq!(out.sk_estimates, [1, 1, 1]);
        assert_eq!(out.pk_estimates, [0b01, 0b01]);
    }

    #[test]
    fn point_mass_binning_is_trivial() {
        let p = binning_protocol(
            &point_mass(),
            &BinningParams {
                n: 5,
                slack: 0.5,
                sk_rate: 0.0,
                pk_rate: 0.0,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!((p.sk_range(), p.pk_range()), (1, 1));
        assert!(p.slots().iter().all(|s| s.alphabet() == 1));
        let out = run(&p, &sample_iid(&point_mass(), 5, 0).unwrap()).unwrap();
        assert_eq!(out.transcript.payloads(), vec![0, 0, 0]);
        assert_eq!(out.sk_estimates, [0, 0, 0]);
    }

    #[test]
    fn binning_rates_and_errors() {
        let xor = xor_source();
        let params = BinningParams {
            n: 6,
            slack: 0.5,
            sk_rate: 0.25,
            pk_rate: 0.0,
            seed: 1,
        };
        let p = binning_protocol(&xor, &params).unwrap();
        assert_eq!(p.sk_range(), 4);
        assert!(p.slots().iter().all(|s| s.alphabet() == 8));

        assert!(matches!(
            binning_protocol_with_budget(&xor, &params, 1000),
            Err(ProtocolError::RateInfeasible { .. })
        ));
        assert!(matches!(
            binning_protocol(&xor, &BinningParams { n: 40, ..params }),
            Err(ProtocolError::RateInfeasible { .. })
        ));
        assert!(matches!(
            binning_protocol(
                &xor,
                &BinningParams {
                    slack: 0.0,
                    ..params
                }
            ),
            Err(ProtocolError::InvalidParameter(_))
        ));
    }

    #[test]
    fn generous_bins_give_omniscience() {
        // 60-bit bins for 8 sequences per terminal: collisions are negligible
        let pmf = cascade_bsc_source(0.25, 0.1).unwrap();
        let p = binning_protocol(
            &pmf,
            &BinningParams {
                n: 3,
                slack: 20.0,
                sk_rate: 1.0,
                pk_rate: 1.0,
                seed: 5,
            },
        )
        .unwrap();
        for seed in 0..30 {
            let out = run(&p, &sample_iid(&pmf, 3, seed).unwrap()).unwrap();
            assert!(out.sk_estimates.iter().all(|&k| k == out.reference_sk()));
            assert_eq!(out.pk_estimates[0], out.pk_estimates[1]);
        }
    }

    #[test]
    fn sequence_index_round_trip() {
        for card in 1..4 {
            for i in 0..(card as u64).pow(4) {
                assert_eq!(sequence_index(&sequence_symbols(i, card, 4), card), i);
            }
        }
    }

    #[test]
    fn corrupted_slot_changes_payload() {
        let p = example1_sk_protocol().with_corrupted_slot(3);
        let out = run(&p, &block(&[0, 1], &[1, 0], &[1, 1])).unwrap();
        assert_eq!(out.transcript.payloads(), vec![0, 0, 1]);
        assert_eq!(out.sk_estimates, [1, 0, 1]);
    }

    #[test]
    fn descriptor_json() {
        let d = ProtocolDescriptor::Timeshare {
            a: Box::new(ProtocolDescriptor::Example1Sk),
            b: Box::new(ProtocolDescriptor::Binning(BinningParams {
                n: 4,
                slack: 0.35,
                sk_rate: 0.1,
                pk_rate: 0.0,
                seed: 9,
            })),
            repeats_a: 1,
            repeats_b: 2,
        };
        let json = d.to_json();
        assert!(json.contains(r#""type":"timeshare""#));
        assert!(json.contains(r#""skRate":0.1"#));
        assert!(json.contains(r#""repeatsA":1"#));
        assert_eq!(ProtocolDescriptor::from_json(&json).unwrap(), d);
        assert_eq!(
            ProtocolDescriptor::from_json(r#"{"type":"example1_sk"}"#).unwrap(),
            ProtocolDescriptor::Example1Sk
        );
        assert!(ProtocolDescriptor::from_json(r#"{"type":"binning","n":3}"#).is_err());
        assert!(ProtocolDescriptor::Custom { name: "x".into() }
            .build(&xor_source())
            .is_err());
        let built = d.build(&cascade_bsc_source(0.25, 0.1).unwrap()).unwrap();
        assert_eq!(built.n(), 10);
    }
}
