//! Randomized operation sequences against the workflow engine, checked
//! step by step against a small reference model.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use archain_core::ca::{CertRegistry, Role, Validity};
use archain_core::clock::{ManualClock, Millis};
use archain_core::crypto::SignatureValue;
use archain_core::guard::{Alarm, GuardError};
use archain_core::ledger::{
    verify_chain_with, Chain, FinalTransaction, Payload, SignatureCache, Status,
};
use archain_core::workflow::{
    is_allowed, sign_append_authorization, signer_role, AppendAuthorization, TransitionProof,
    Verdict, Workflow, WorkflowConfig, WorkflowError,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{content, metadata, Member, World, T0};

pub const WINDOW_MS: Millis = 1_000;
const SLOTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Who {
    Admin,
    User,
    Expert(usize),
    StaleAdmin,
    StaleUser,
    StaleExpert,
}

impl Who {
    const ALL: [Who; 7] = [
        Who::Admin,
        Who::User,
        Who::Expert(0),
        Who::Expert(1),
        Who::StaleAdmin,
        Who::StaleUser,
        Who::StaleExpert,
    ];

    fn is_stale(self) -> bool {
        matches!(self, Who::StaleAdmin | Who::StaleUser | Who::StaleExpert)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Create {
        slot: usize,
        who: Who,
        empty: bool,
    },
    Assign {
        slot: usize,
        who: Who,
        target: Who,
    },
    Decide {
        slot: usize,
        who: Who,
        verdict: Verdict,
        auth: bool,
        forge: bool,
    },
    Archive {
        slot: usize,
        who: Who,
        supply: bool,
        fault: bool,
    },
    Advance(Millis),
    Sweep,
}

/// Members in every role plus revoked counterparts, and a genesis-only main
/// chain shared by all sequences.
pub struct Cast {
    pub world: World,
    pub admin: Member,
    pub user: Member,
    pub experts: [Member; 2],
    pub stale_admin: Member,
    pub stale_user: Member,
    pub stale_expert: Member,
    genesis: Chain,
    proofs: RefCell<HashMap<(Who, usize, Status, Millis), TransitionProof>>,
    auths: RefCell<HashMap<(usize, usize), SignatureValue>>,
    cache: SignatureCache,
}

impl Cast {
    pub fn new() -> Self {
        let mut world = World::new();
        let admin = world.enroll(Role::Administrator);
        let user = world.enroll(Role::User);
        let experts = [world.enroll(Role::Expert), world.enroll(Role::Expert)];
        let stale_admin = world.enroll(Role::Administrator);
        let stale_user = world.enroll(Role::User);
        let stale_expert = world.enroll(Role::Expert);
        for m in [&stale_admin, &stale_user, &stale_expert] {
            world.revoke(m);
        }
        let mut genesis = Chain::new();
        genesis
            .genesis("Fuzz archive", &admin.identity, &ManualClock::new(T0))
            .unwrap();
        Self {
            world,
            admin,
            user,
            experts,
            stale_admin,
            stale_user,
            stale_expert,
            genesis,
            proofs: RefCell::default(),
            auths: RefCell::default(),
            cache: SignatureCache::new(),
        }
    }

    pub fn registry(&self) -> &CertRegistry {
        self.world.ca.registry()
    }

    fn member(&self, who: Who) -> &Member {
        match who {
            Who::Admin => &self.admin,
            Who::User => &self.user,
            Who::Expert(k) => &self.experts[k],
            Who::StaleAdmin => &self.stale_admin,
            Who::StaleUser => &self.stale_user,
            Who::StaleExpert => &self.stale_expert,
        }
    }

    fn proof(&self, who: Who, slot: usize, status: Status, ts: Millis) -> TransitionProof {
        self.proofs
            .borrow_mut()
            .entry((who, slot, status, ts))
            .or_insert_with(|| {
                let (_, digest) = content(slot as u64);
                TransitionProof::sign(
                    &self.member(who).identity,
                    &doc_id(slot),
                    status,
                    ts,
                    &digest,
                )
            })
            .clone()
    }

    fn append_auth(&self, expert: usize, slot: usize) -> SignatureValue {
        self.auths
            .borrow_mut()
            .entry((expert, slot))
            .or_insert_with(|| {
                let (_, digest) = content(slot as u64);
                let key = self.experts[expert].identity.append_key.as_ref().unwrap();
                sign_append_authorization(key, &doc_id(slot), &digest)
            })
            .clone()
    }
}

fn doc_id(slot: usize) -> String {
    format!("doc-{slot}")
}

#[derive(Clone, Debug, Default)]
pub struct FuzzStats {
    pub sequences: u64,
    pub operations: u64,
    pub accepted: u64,
    pub added: u64,
    pub rejected: u64,
    pub expired: u64,
    pub revoked_refusals: u64,
    pub alarms: u64,
}

#[derive(Clone, Debug)]
struct DocModel {
    status: Status,
    expert: Option<usize>,
    deadline: Option<Millis>,
    has_auth: bool,
}

fn random_op(rng: &mut StdRng, model: &BTreeMap<usize, DocModel>) -> Op {
    let slot = rng.gen_range(0..SLOTS);
    if rng.gen_bool(0.6) {
        if let Some(op) = next_step(rng, slot, model.get(&slot)) {
            return op;
        }
    }
    let who = Who::ALL[rng.gen_range(0..Who::ALL.len())];
    match rng.gen_range(0..100) {
        0..=17 => Op::Create {
            slot,
            who,
            empty: rng.gen_bool(0.05),
        },
        18..=37 => Op::Assign {
            slot,
            who,
            target: [Who::Expert(0), Who::Expert(1), Who::StaleExpert, Who::User]
                [rng.gen_range(0..4)],
        },
        38..=62 => Op::Decide {
            slot,
            who,
            verdict: if rng.gen_bool(0.7) {
                Verdict::Approved
            } else {
                Verdict::Rejected
            },
            auth: rng.gen_bool(0.8),
            forge: rng.gen_bool(0.05),
        },
        63..=80 => Op::Archive {
            slot,
            who,
            supply: rng.gen_bool(0.3),
            fault: rng.gen_bool(0.1),
        },
        81..=93 => Op::Advance([0, 1, 250, 999, 1_000, 1_001, 5_000][rng.gen_range(0..7)]),
        _ => Op::Sweep,
    }
}

/// The operation that would move a document along, with the right signer
/// most of the time so sequences reach the later statuses.
fn next_step(rng: &mut StdRng, slot: usize, doc: Option<&DocModel>) -> Option<Op> {
    let right = rng.gen_bool(0.85);
    Some(match doc.map(|d| (d.status, d.expert)) {
        None => Op::Create {
            slot,
            who: if right { Who::User } else { Who::StaleUser },
            empty: false,
        },
        Some((Status::Created, _)) => Op::Assign {
            slot,
            who: if right { Who::Admin } else { Who::StaleAdmin },
            target: Who::Expert(rng.gen_range(0..2)),
        },
        Some((Status::OnExamination, Some(k))) => Op::Decide {
            slot,
            who: if right {
                Who::Expert(k)
            } else {
                Who::Expert(1 - k)
            },
            verdict: if rng.gen_bool(0.75) {
                Verdict::Approved
            } else {
                Verdict::Rejected
            },
            auth: rng.gen_bool(0.9),
            forge: false,
        },
        Some((Status::Approved, _)) => Op::Archive {
            slot,
            who: if right { Who::Admin } else { Who::StaleAdmin },
            supply: rng.gen_bool(0.5),
            fault: rng.gen_bool(0.15),
        },
        _ => return None,
    })
}

/// Runs one sequence per seed; returns the first violation found.
pub fn run_sequences(
    cast: &Cast,
    seeds: impl IntoIterator<Item = u64>,
    ops_per_sequence: std::ops::Range<usize>,
) -> Result<FuzzStats, String> {
    let mut stats = FuzzStats::default();
    for seed in seeds {
        run_one(cast, seed, ops_per_sequence.clone(), &mut stats)
            .map_err(|e| format!("seed {seed}: {e}"))?;
        stats.sequences += 1;
    }
    Ok(stats)
}

fn run_one(
    cast: &Cast,
    seed: u64,
    len: std::ops::Range<usize>,
    stats: &mut FuzzStats,
) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let config = WorkflowConfig {
        examination_window_ms: WINDOW_MS,
        ..WorkflowConfig::default()
    };
    let mut wf = Workflow::new(config);
    let mut chain = cast.genesis.clone();
    let mut model: BTreeMap<usize, DocModel> = BTreeMap::new();
    let mut pinned = [false; 2];
    let mut now = T0 + 10;
    let mut trace = String::new();
    let n = rng.gen_range(len);

    for _ in 0..n {
        let op = random_op(&mut rng, &model);
        let _ = writeln!(trace, "  @{} {op:?}", now - T0);
        stats.operations += 1;
        let registry = cast.registry();
        let (expected, stale_gate, result): (bool, bool, Result<(), WorkflowError>) =
            match op.clone() {
                Op::Create { slot, who, empty } => {
                    let fresh = !model.contains_key(&slot);
                    let expected = fresh && !empty && who == Who::User;
                    let (bytes, digest) = content(slot as u64);
                    let len = if empty { 0 } else { bytes.len() as u64 };
                    let proof = cast.proof(who, slot, Status::Created, now);
                    let r = wf
                        .create_document(
                            registry,
                            now,
                            &doc_id(slot),
                            digest,
                            len,
                            metadata(&doc_id(slot)),
                            &proof,
                        )
                        .map(|_| ());
                    if r.is_ok() {
                        model.insert(
                            slot,
                            DocModel {
                                status: Status::Created,
                                expert: None,
                                deadline: None,
                                has_auth: false,
                            },
                        );
                    }
                    (expected, fresh && !empty && who.is_stale(), r)
                }
                Op::Assign { slot, who, target } => {
                    let ready = model
                        .get(&slot)
                        .is_some_and(|d| d.status == Status::Created);
                    let target_ok = matches!(target, Who::Expert(_));
                    let expected = ready && who == Who::Admin && target_ok;
                    let proof = cast.proof(who, slot, Status::OnExamination, now);
                    let target_id = cast.member(target).user_id;
                    let r = wf
                        .assign_expert(registry, now, &doc_id(slot), target_id, None, &proof)
                        .map(|_| ());
                    if r.is_ok() {
                        let d = model.get_mut(&slot).unwrap();
                        d.status = Status::OnExamination;
                        d.expert = match target {
                            Who::Expert(k) => Some(k),
                            _ => None,
                        };
                        d.deadline = Some(now + WINDOW_MS);
                    }
                    (expected, ready && who.is_stale(), r)
                }
                Op::Decide {
                    slot,
                    who,
                    verdict,
                    auth,
                    forge,
                } => {
                    let ready = model
                        .get(&slot)
                        .is_some_and(|d| d.status == Status::OnExamination);
                    let expected = ready && !forge && {
                        let d = &model[&slot];
                        matches!(who, Who::Expert(k) if d.expert == Some(k))
                            && now < d.deadline.unwrap()
                    };
                    let signed_status = match (forge, verdict) {
                        (false, v) => v.status(),
                        (true, Verdict::Approved) => Status::Rejected,
                        (true, Verdict::Rejected) => Status::Approved,
                    };
                    let proof = cast.proof(who, slot, signed_status, now);
                    let authorization = match (auth, who) {
                        (true, Who::Expert(k)) => {
                            let key = cast.experts[k].identity.append_key.as_ref().unwrap();
                            Some(AppendAuthorization {
                                public_key: Some(key.public_key().clone()),
                                signature: Some(cast.append_auth(k, slot)),
                            })
                        }
                        _ => None,
                    };
                    let r = wf
                        .decide(
                            registry,
                            now,
                            &doc_id(slot),
                            verdict,
                            &proof,
                            authorization.as_ref(),
                        )
                        .map(|_| ());
                    if r.is_ok() {
                        let d = model.get_mut(&slot).unwrap();
                        d.status = verdict.status();
                        if verdict == Verdict::Approved && authorization.is_some() {
                            d.has_auth = true;
                            pinned[d.expert.unwrap()] = true;
                        }
                    }
                    (expected, ready && who == Who::StaleExpert, r)
                }
                Op::Archive {
                    slot,
                    who,
                    supply,
                    fault,
                } => {
                    let ready = model
                        .get(&slot)
                        .is_some_and(|d| d.status == Status::Approved);
                    let expected = ready && !fault && who == Who::Admin && {
                        let d = &model[&slot];
                        pinned[d.expert.unwrap()] && (d.has_auth || supply)
                    };
                    let proof = cast.proof(who, slot, Status::Added, now);
                    let supplied = match (supply, model.get(&slot).and_then(|d| d.expert)) {
                        (true, Some(k)) => Some(cast.append_auth(k, slot)),
                        _ => None,
                    };
                    let before = chain.len();
                    let clock = ManualClock::new(now);
                    let admin = &cast.admin.identity;
                    let r = wf
                        .archive(
                            registry,
                            now,
                            &doc_id(slot),
                            &proof,
                            supplied.as_ref(),
                            |tx| {
                                if fault {
                                    return Err(GuardError::Alarm(Box::new(Alarm {
                                        at: now,
                                        expected: None,
                                        computed: String::new(),
                                        reason: "injected".into(),
                                    })));
                                }
                                chain
                                    .append(tx, admin, &clock)
                                    .map_err(GuardError::AppendRejected)
                            },
                        )
                        .map(|_| ());
                    match &r {
                        Ok(()) => {
                            model.get_mut(&slot).unwrap().status = Status::Added;
                            stats.added += 1;
                        }
                        Err(WorkflowError::Commit(GuardError::Alarm(_))) => {
                            stats.alarms += 1;
                            if chain.len() != before {
                                return Err(format!("chain grew despite an alarm\n{trace}"));
                            }
                        }
                        Err(_) => {}
                    }
                    (expected, ready && who == Who::StaleAdmin, r)
                }
                Op::Advance(ms) => {
                    now += ms;
                    continue;
                }
                Op::Sweep => {
                    let due: Vec<String> = model
                        .iter()
                        .filter(|(_, d)| {
                            d.status == Status::OnExamination && d.deadline.unwrap() <= now
                        })
                        .map(|(s, _)| doc_id(*s))
                        .collect();
                    let got = wf
                        .expire_documents(registry, now, &cast.admin.identity)
                        .map_err(|e| format!("sweep failed: {e}\n{trace}"))?;
                    if got != due {
                        return Err(format!("sweep expired {got:?}, expected {due:?}\n{trace}"));
                    }
                    if !wf
                        .expire_documents(registry, now, &cast.admin.identity)
                        .unwrap()
                        .is_empty()
                    {
                        return Err(format!("second sweep was not empty\n{trace}"));
                    }
                    for d in model.values_mut() {
                        if d.status == Status::OnExamination && d.deadline.unwrap() <= now {
                            d.status = Status::Expired;
                            stats.expired += 1;
                        }
                    }
                    continue;
                }
            };
        if result.is_ok() != expected {
            return Err(format!(
                "{op:?} gave {result:?}, model expected success={expected}\n{trace}"
            ));
        }
        if result.is_ok() {
            stats.accepted += 1;
        }
        if stale_gate {
            match result {
                Err(WorkflowError::InvalidCertificate {
                    validity: Validity::Revoked,
                    ..
                }) => stats.revoked_refusals += 1,
                other => return Err(format!("revoked signer not refused: {other:?}\n{trace}")),
            }
        }
        for (slot, d) in &model {
            let actual = wf.document(&doc_id(*slot)).map(|doc| doc.status);
            if actual != Some(d.status) {
                return Err(format!(
                    "{} is {actual:?}, model says {}\n{trace}",
                    doc_id(*slot),
                    d.status
                ));
            }
        }
        if wf.documents().count() != model.len() {
            return Err(format!("unexpected documents\n{trace}"));
        }
    }
    stats.rejected += model
        .values()
        .filter(|d| d.status == Status::Rejected)
        .count() as u64;
    check_final_state(cast, &wf, &chain).map_err(|e| format!("{e}\n{trace}"))
}

/// Lifecycle graph, single verdict, valid signer per transition, and the
/// Added-document to chain-row bijection.
pub fn check_final_state(cast: &Cast, wf: &Workflow, chain: &Chain) -> Result<(), String> {
    let registry = cast.registry();
    for doc in wf.documents() {
        doc.check_invariants()?;
        let mut prev = None;
        for t in &doc.transition_log {
            if !is_allowed(prev, t.new_status) {
                return Err(format!("{}: {prev:?} -> {}", doc.doc_id, t.new_status));
            }
            prev = Some(t.new_status);
            let cert = registry
                .valid_certificate(t.signer_cert_id, t.timestamp)
                .map_err(|v| format!("{} signed under a {v} certificate", t.new_status))?;
            if cert.holder_category != signer_role(t.new_status) {
                return Err(format!(
                    "{} signed by a {}",
                    t.new_status, cert.holder_category
                ));
            }
            if !cast.cache.verify(
                &cert.public_key,
                &t.message(&doc.content_digest),
                &t.signature,
            ) {
                return Err(format!("{}: bad signature on {}", doc.doc_id, t.new_status));
            }
        }
        let verdicts = doc
            .transition_log
            .iter()
            .filter(|t| {
                matches!(
                    t.new_status,
                    Status::Approved | Status::Rejected | Status::Expired
                )
            })
            .count();
        if verdicts > 1 {
            return Err(format!("{} has {verdicts} verdicts", doc.doc_id));
        }
    }

    let report = verify_chain_with(chain.rows(), registry, Some(&cast.cache));
    if !report.valid {
        return Err(format!("main chain: {report}"));
    }
    let mut archived: BTreeMap<String, u64> = BTreeMap::new();
    for row in &chain.rows()[1..] {
        let Ok(Payload::FinalTransaction(tx)) = row.decode_payload() else {
            return Err(format!("row {} is not a final transaction", row.index));
        };
        if archived.insert(tx.doc_id.clone(), row.index).is_some() {
            return Err(format!("{} archived twice", tx.doc_id));
        }
        let doc = wf
            .document(&tx.doc_id)
            .ok_or_else(|| format!("row {} names unknown {}", row.index, tx.doc_id))?;
        if doc.status != Status::Added || doc.ledger_index != Some(row.index) {
            return Err(format!("row {} does not match {}", row.index, doc.doc_id));
        }
        check_recoverable(doc, &tx)?;
    }
    let added = wf.documents_with_status(Status::Added).count();
    if added != archived.len() {
        return Err(format!(
            "{added} Added documents but {} rows",
            archived.len()
        ));
    }
    Ok(())
}

/// Items 1-7 of the archival record, read back from the row payload.
pub fn check_recoverable(
    doc: &archain_core::workflow::Document,
    tx: &FinalTransaction,
) -> Result<(), String> {
    let created = doc.transition(Status::Created).unwrap();
    let approved = doc.transition(Status::Approved).unwrap();
    let added = doc.transition(Status::Added).unwrap();
    let checks = [
        ("document id", tx.doc_id == doc.doc_id),
        ("creation time", tx.doc_created_at == created.timestamp),
        ("metadata", tx.metadata == doc.metadata),
        (
            "content digest",
            tx.content_digest() == Some(doc.content_digest),
        ),
        ("creator signature", tx.creator == created.endorsement()),
        ("examination time", tx.examined_at == approved.timestamp),
        ("examiner signature", tx.examiner == approved.endorsement()),
        ("archiver signature", tx.archiver == added.endorsement()),
        ("transaction time", tx.tx_timestamp == added.timestamp),
    ];
    match checks.iter().find(|(_, ok)| !ok) {
        Some((what, _)) => Err(format!("{}: {what} not recoverable", doc.doc_id)),
        None => Ok(()),
    }
}
