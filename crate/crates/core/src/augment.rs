//! Feature augmentation over a calibrated gram CJT: a candidate relation is
//! attached as a new leaf bag, one message is computed into it, and the
//! regression is retrained from the absorbed gram matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::Executor;
use crate::error::{Error, Result};
use crate::jointree::{AnnotationSet, BagAnnotation, BagId, Placement};
use crate::manager::{execute_plan, Cjt};
use crate::planner::{plan_bound, PlanOptions, SteinerPlan};
use crate::relation::{AnnotatedRelation, AttrDef, CsvOptions, Schema, Table};
use crate::semiring::{solve_linreg, Annotation, Gram, LinearModel, SemiringSpec, DEFAULT_RIDGE};
use crate::synth;
use crate::value::{attr, Attr, Value};

/// A relation offering one numeric feature, joined on `keys`.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub name: String,
    pub keys: Vec<String>,
    pub feature: String,
    pub table: Arc<Table>,
    /// Bag to attach to; otherwise the lowest-id bag holding every key.
    pub bag: Option<BagId>,
}

/// JSON descriptor of a candidate stored as CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateDoc {
    pub name: String,
    pub csv: PathBuf,
    pub keys: Vec<String>,
    pub feature: String,
    #[serde(default)]
    pub bag: Option<BagId>,
}

impl Candidate {
    pub fn new(name: &str, table: Table, keys: &[&str], feature: &str) -> Result<Candidate> {
        for k in keys.iter().chain(std::iter::once(&feature)) {
            if table.schema.position(k).is_none() {
                return Err(Error::UnknownAttribute(k.to_string()));
            }
        }
        Ok(Candidate {
            name: name.to_string(),
            keys: keys.iter().map(|k| k.to_string()).collect(),
            feature: feature.to_string(),
            table: Arc::new(table),
            bag: None,
        })
    }

    /// Loads a descriptor; the CSV path is relative to the descriptor.
    pub fn load(path: &Path) -> Result<Candidate> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let doc: CandidateDoc = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut defs: Vec<AttrDef> = doc.keys.iter().map(|k| AttrDef::categorical(k)).collect();
        defs.push(AttrDef::numeric(&doc.feature));
        let table = Table::load_csv(&base.join(&doc.csv), &Schema::new(defs)?, &CsvOptions::default())?;
        let keys: Vec<&str> = doc.keys.iter().map(String::as_str).collect();
        let mut c = Candidate::new(&doc.name, table, &keys, &doc.feature)?;
        c.bag = doc.bag;
        Ok(c)
    }

    fn key_set(&self) -> BTreeSet<Attr> {
        self.keys.iter().map(|k| attr(k)).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainResult {
    pub candidate: String,
    pub bag: BagId,
    pub model: LinearModel,
    pub r2_train: f64,
    pub r2_heldout: Option<f64>,
    /// Messages computed on the training CJT (always one).
    pub messages_computed: usize,
    #[serde(skip)]
    pub gram: Gram,
}

fn gram_spec(cjt: &Cjt) -> Result<(&[String], &str)> {
    match &cjt.annotations.aggregate {
        SemiringSpec::Gram { features, target } => Ok((features, target)),
        other => Err(Error::InvalidQuery(format!("augmentation needs a gram aggregate, got {other:?}"))),
    }
}

/// Bag of `cjt` that holds every key of `cand`.
pub fn target_bag(cjt: &Cjt, cand: &Candidate) -> Result<BagId> {
    let keys = cand.key_set();
    if let Some(b) = cand.bag {
        let bag = cjt.jt.bag(b)?;
        return if keys.is_subset(&bag.attrs) {
            Ok(b)
        } else {
            Err(Error::InvalidQuery(format!("bag {b} does not hold the keys of `{}`", cand.name)))
        };
    }
    cjt.jt.bags().iter().find(|b| keys.is_subset(&b.attrs)).map(|b| b.id).ok_or_else(|| {
        Error::InvalidQuery(format!(
            "keys {:?} of `{}` span several bags; use a multi-key aggregate or add an empty bag",
            cand.keys, cand.name
        ))
    })
}

/// Gram matrix of the base join extended by `cand`, computed from the
/// calibrated store plus one new message. Returns (gram, messages computed,
/// bag).
pub fn augmented_gram(cjt: &Cjt, cand: &Candidate) -> Result<(Gram, usize, BagId)> {
    let (features, target) = gram_spec(cjt)?;
    if features.iter().any(|f| *f == cand.feature) || target == cand.feature {
        return Err(Error::InvalidQuery(format!("feature `{}` is already in the model", cand.feature)));
    }
    let b = target_bag(cjt, cand)?;
    let (jt2, r) = cjt.jt.attach_leaf(&cand.name, cand.key_set(), b)?;
    let exec = Executor::new(&cjt.graph, &jt2, &cjt.annotations);
    let message = {
        let store = cjt.store.read().unwrap();
        exec.compute_message(b, r, &store)?
    };
    let computed = exec.stats.snapshot().messages_computed;

    // layout [1, features, target] → [1, features, z, target]
    let k = features.len();
    let dim = k + 3;
    let mut positions: Vec<usize> = (0..=k).collect();
    positions.push(k + 2);
    let widened: Vec<(Vec<Value>, Annotation)> = message
        .content
        .rows()
        .iter()
        .map(|(t, a)| {
            let g = a.as_gram().expect("gram CJT carries gram annotations");
            (t.to_vec(), Annotation::Gram(Box::new(g.embed(dim, &positions))))
        })
        .collect();
    let wide_spec = SemiringSpec::Gram {
        features: features.iter().cloned().chain(std::iter::once(cand.feature.clone())).collect(),
        target: target.to_string(),
    };
    let widened = AnnotatedRelation::from_rows(message.content.attrs().to_vec(), wide_spec.kind(), widened)?;
    let lifted = cand.table.annotate(&wide_spec, &|a| a == cand.feature, false)?.project_onto(&cand.key_set());
    let total = widened.join(&lifted)?.total();
    let gram = total.as_gram().cloned().unwrap_or_else(|| Gram::zeros(dim));
    Ok((gram, computed, b))
}

/// Attaches `cand`, computes the single message into it and retrains.
/// `cjt` is not modified.
pub fn attach_and_train(cjt: &Cjt, cand: &Candidate, heldout: Option<&Cjt>) -> Result<TrainResult> {
    let (gram, computed, bag) = augmented_gram(cjt, cand)?;
    let model = solve_linreg(&Annotation::Gram(Box::new(gram.clone())), DEFAULT_RIDGE)?;
    let r2_train = model.r2(&gram);
    let r2_heldout = match heldout {
        Some(h) => Some(model.r2(&augmented_gram(h, cand)?.0)),
        None => None,
    };
    Ok(TrainResult { candidate: cand.name.clone(), bag, model, r2_train, r2_heldout, messages_computed: computed, gram })
}

/// Trains every candidate independently and ranks by held-out R² (training
/// R² without a held-out CJT), best first; ties keep input order.
pub fn evaluate_candidates(cjt: &Cjt, cands: &[Candidate], heldout: Option<&Cjt>) -> Result<Vec<TrainResult>> {
    let mut out = cands.iter().map(|c| attach_and_train(cjt, c, heldout)).collect::<Result<Vec<_>>>()?;
    let score = |r: &TrainResult| r.r2_heldout.unwrap_or(r.r2_train);
    out.sort_by(|a, b| score(b).total_cmp(&score(a)));
    Ok(out)
}

/// Outcome of [`multi_key_aggregate`].
pub struct KeyAggregate {
    pub relation: AnnotatedRelation,
    pub plan: SteinerPlan,
    pub computed: usize,
}

/// Aggregate of the base query grouped by `keys`, planned against `cjt`.
///
/// γ annotations go to the bag covering most keys (lowest id on ties) and,
/// for keys it lacks, to the nearest bag holding them, so keys within one
/// bag reduce to re-marginalizing its absorption.
pub fn multi_key_aggregate(cjt: &Cjt, keys: &[&str]) -> Result<KeyAggregate> {
    let jt = &cjt.jt;
    for k in keys {
        if jt.bags_with(k).is_empty() {
            return Err(Error::UnknownAttribute(k.to_string()));
        }
    }
    let anchor = (0..jt.len())
        .max_by(|a, b| {
            let cover = |x: usize| keys.iter().filter(|k| jt.bags()[x].attrs.contains(**k)).count();
            cover(*a).cmp(&cover(*b)).then(b.cmp(a))
        })
        .expect("a hypertree has at least one bag");
    let mut ann = (*cjt.annotations).clone();
    let existing: Vec<Placement> =
        ann.placements().iter().filter(|p| matches!(p.annotation, BagAnnotation::GroupBy { .. } | BagAnnotation::Marginalize { .. })).cloned().collect();
    for p in existing {
        ann.remove(p.bag, &p.annotation);
    }
    let mut group_by = BTreeSet::new();
    for k in keys {
        let bag = jt
            .bags_with(k)
            .into_iter()
            .min_by_key(|b| (jt.path(anchor, *b).len(), *b))
            .expect("checked above");
        ann.push(bag, BagAnnotation::GroupBy { attr: k.to_string() });
        group_by.insert(attr(k));
    }
    let ann = AnnotationSet::new(ann.aggregate.clone(), group_by, ann.placements().to_vec());
    ann.check(&cjt.graph, jt)?;
    let store = cjt.store.read().unwrap();
    let avail = |(u, v): (BagId, BagId), fp: &str| store.get(u, v).is_some_and(|m| m.fingerprint.as_deref() == Some(fp));
    let entry = &cjt.entry;
    let plan = plan_bound(&entry.id, &entry.graph, jt, Some(&cjt.annotations), ann, &entry.cost, &PlanOptions::default(), &avail);
    drop(store);
    let mut lineage = cjt.lineage.clone();
    lineage.group_by = keys.iter().map(|k| k.to_string()).collect();
    let d = execute_plan(cjt, &plan, &lineage, None)?;
    Ok(KeyAggregate { relation: d.answer, plan, computed: d.computed })
}

/// Seeded candidates for `keys`. Candidate 0 carries the exact per-key mean
/// of the target; candidate i > 0 blends that mean with Gaussian noise using
/// a weight φ = min(1, 1/x), x ~ Exp(mean 10). Returns each candidate with
/// its φ.
pub fn synthetic_candidates(cjt: &Cjt, keys: &[&str], n: usize, seed: u64) -> Result<Vec<(Candidate, f64)>> {
    let agg = multi_key_aggregate(cjt, keys)?;
    let rel = &agg.relation;
    let key_pos: Vec<usize> = keys.iter().map(|k| rel.attrs().iter().position(|a| &**a == *k).unwrap()).collect();
    let mut means: Vec<(Vec<Value>, f64)> = Vec::new();
    for (t, a) in rel.rows() {
        let g = a.as_gram().ok_or_else(|| Error::InvalidQuery("gram aggregate required".into()))?;
        let t_idx = g.dim() - 1;
        if g.count() > 0.0 {
            means.push((key_pos.iter().map(|i| t[*i]).collect(), g.get(0, t_idx) / g.count()));
        }
    }
    let mu = means.iter().map(|m| m.1).sum::<f64>() / means.len().max(1) as f64;
    let sd = (means.iter().map(|m| (m.1 - mu).powi(2)).sum::<f64>() / means.len().max(1) as f64).sqrt().max(1e-3);
    let mut rng = synth::rng(seed);
    let exp = Exp::new(0.1).expect("positive rate");
    let noise = Normal::new(mu, sd).expect("finite parameters");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let phi = if i == 0 { 1.0 } else { (1.0 / exp.sample(&mut rng) as f64).min(1.0) };
        let feature = format!("z{i}");
        let mut defs: Vec<AttrDef> = keys.iter().map(|k| AttrDef::categorical(k)).collect();
        defs.push(AttrDef::numeric(&feature));
        let rows: Vec<Vec<Value>> = means
            .iter()
            .map(|(key, m)| {
                let v = phi * m + (1.0 - phi) * noise.sample(&mut rng);
                key.iter().copied().chain(std::iter::once(Value::num(v))).collect()
            })
            .collect();
        let table = Table::new(Schema::new(defs)?, rows)?;
        out.push((Candidate::new(&format!("cand{i}"), table, keys, &feature)?, phi));
    }
    Ok(out)
}

/// Per-key means of the target, for tests and reports.
pub fn target_means(rel: &AnnotatedRelation) -> BTreeMap<Vec<Value>, f64> {
    rel.rows()
        .iter()
        .filter_map(|(t, a)| {
            let g = a.as_gram()?;
            (g.count() > 0.0).then(|| (t.to_vec(), g.get(0, g.dim() - 1) / g.count()))
        })
        .collect()
}
