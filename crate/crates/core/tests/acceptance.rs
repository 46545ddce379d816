//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ontorec::context::{
    apply_context, location_filter, repetition_willingness, ContextParams, ContextState, GeoPoint, LocationMode,
    Weather,
};
use ontorec::demographic::{choose_k, kprototypes_fit, ClusterConfig, UserRecord, GENDERS, GROUP_COMPS, JOBS, REGIONS};
use ontorec::engine::{Engine, EngineConfig, Event, RequestContext};
use ontorec::eventlog::{restore, EventLog, EventLogRecord, Snapshot};
use ontorec::ffm::{
    example_gradient, example_loss, ffm_predict, ffm_train, mean_logloss, FfmExample, FfmModel, FfmTriple, TrainConfig,
};
use ontorec::metrics::{
    coverage, diversity, map_at_k, mar_at_k, novelty, personalization, EvalSet, RecallConvention, UserEval,
};
use ontorec::ontology::{load_ontology, ItemRecord, OntologyGraph};
use ontorec::phase::PhaseConfig;
use ontorec::popularity::PopularityStats;
use ontorec::preferences::{FeedbackEvent, FeedbackKind};
use ontorec::simulation::{run_simulation, SimulationPlan};
use ontorec::synthetic::{gen_latent_prefs, gen_users, hl_selection, GenConfig};
use ontorec::{ItemId, RecommenderKind, UserId};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.2?}, limit {limit:?}"))
}

fn ids(v: &[u32]) -> Vec<ItemId> {
    v.iter().copied().map(ItemId).collect()
}

fn eval_user(u: u32, recs: &[u32], rel: &[u32]) -> UserEval {
    UserEval {
        user: UserId(u),
        recs: ids(recs),
        relevant: ids(rel).into_iter().collect(),
    }
}

fn eval_set(users: Vec<UserEval>, n_items: u32) -> EvalSet {
    EvalSet {
        users,
        train_items: (0..n_items).map(ItemId).collect(),
        counts: BTreeMap::new(),
        population: None,
    }
}

/// AP by enumerating every prefix: mean of precision at each hit,
/// divided by min(m, K).
fn brute_ap(recs: &[ItemId], rel: &BTreeSet<ItemId>, k: usize) -> f64 {
    let mut sum = 0.0;
    for cut in 1..=k.min(recs.len()) {
        if rel.contains(&recs[cut - 1]) {
            let hits = recs[..cut].iter().filter(|i| rel.contains(i)).count();
            sum += hits as f64 / cut as f64;
        }
    }
    if rel.is_empty() {
        0.0
    } else {
        sum / rel.len().min(k) as f64
    }
}

/// Recall-weighted AR: Σ recall@cut over hits, divided by m.
fn brute_ar(recs: &[ItemId], rel: &BTreeSet<ItemId>, k: usize) -> f64 {
    let mut sum = 0.0;
    for cut in 1..=k.min(recs.len()) {
        if rel.contains(&recs[cut - 1]) {
            let hits = recs[..cut].iter().filter(|i| rel.contains(i)).count();
            sum += hits as f64 / rel.len() as f64;
        }
    }
    if rel.is_empty() {
        0.0
    } else {
        sum / rel.len() as f64
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let s = eval_set(vec![eval_user(0, &[0, 1, 2], &[0, 2])], 3);
    let map = map_at_k(&s, 3).map_err(|e| e.to_string())?;
    let mar = mar_at_k(&s, 3, RecallConvention::RecallWeighted).map_err(|e| e.to_string())?;
    // AP = (1/1 + 2/3) / 2; AR = (1/2 + 2/2) / 2
    ensure((map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9, || format!("MAP {map}"))?;
    ensure((mar - 0.75).abs() < 1e-9, || format!("MAR {mar}"))?;
    let (u, r) = (&s.users[0].recs, &s.users[0].relevant);
    ensure((brute_ap(u, r, 3) - map).abs() < 1e-9, || "MAP differs from prefix oracle".into())?;
    ensure((brute_ar(u, r, 3) - mar).abs() < 1e-9, || "MAR differs from prefix oracle".into())?;

    // random sets against the prefix oracle
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let set = random_eval_set(&mut rng, 12, 6);
        let k = rng.random_range(1..=6);
        let want: f64 =
            set.users.iter().map(|u| brute_ap(&u.recs, &u.relevant, k)).sum::<f64>() / set.users.len() as f64;
        let got = map_at_k(&set, k).map_err(|e| e.to_string())?;
        ensure((want - got).abs() < 1e-9, || format!("MAP@{k} {got} vs oracle {want}"))?;
        let want: f64 =
            set.users.iter().map(|u| brute_ar(&u.recs, &u.relevant, k)).sum::<f64>() / set.users.len() as f64;
        let got = mar_at_k(&set, k, RecallConvention::RecallWeighted).map_err(|e| e.to_string())?;
        ensure((want - got).abs() < 1e-9, || format!("MAR@{k} {got} vs oracle {want}"))?;
    }

    // personalization: identical lists -> 0, disjoint -> 1, half overlap of 4 -> 0.5
    let p = |users| personalization(&eval_set(users, 10)).unwrap();
    ensure(p(vec![eval_user(0, &[0, 1], &[]), eval_user(1, &[0, 1], &[])]).abs() < 1e-9, || "identical".into())?;
    ensure((p(vec![eval_user(0, &[0, 1], &[]), eval_user(1, &[2, 3], &[])]) - 1.0).abs() < 1e-9, || "disjoint".into())?;
    ensure(
        (p(vec![eval_user(0, &[0, 1, 2, 3], &[]), eval_user(1, &[0, 1, 4, 5], &[])]) - 0.5).abs() < 1e-9,
        || "half overlap".into(),
    )?;

    // coverage: one distinct item of 29
    let c = coverage(&eval_set(vec![eval_user(0, &[3], &[]), eval_user(1, &[3], &[])], 29)).unwrap();
    ensure((c - 1.0 / 29.0).abs() < 1e-9, || format!("coverage {c}"))?;

    // diversity: two items sharing 1 of 2 features each -> cos 0.5, diversity 0.5
    let feats: BTreeMap<ItemId, Vec<f64>> =
        [(ItemId(0), vec![1.0, 1.0, 0.0]), (ItemId(1), vec![0.0, 1.0, 1.0])].into();
    let (d, _) = diversity(&eval_set(vec![eval_user(0, &[0, 1], &[])], 2), &feats).unwrap();
    ensure((d - 0.5).abs() < 1e-9, || format!("diversity {d}"))?;
    let same: BTreeMap<ItemId, Vec<f64>> = [(ItemId(0), vec![1.0, 0.0]), (ItemId(1), vec![1.0, 0.0])].into();
    let (d, _) = diversity(&eval_set(vec![eval_user(0, &[0, 1], &[])], 2), &same).unwrap();
    ensure(d.abs() < 1e-9, || format!("identical-feature diversity {d}"))?;

    // novelty: item consumed by 1 of 8 users -> 3 bits; by all -> 0
    let mut s = eval_set(vec![eval_user(0, &[0], &[]), eval_user(1, &[1], &[])], 2);
    s.counts = [(ItemId(0), 1), (ItemId(1), 8)].into();
    s.population = Some(8);
    let n = novelty(&s).unwrap();
    ensure((n - 1.5).abs() < 1e-9, || format!("novelty {n}"))?;

    within(start, Duration::from_secs(1))?;
    Ok(format!("MAP {map:.4} MAR {mar:.4}"))
}

fn random_eval_set(rng: &mut ChaCha8Rng, n_items: u32, max_m: usize) -> EvalSet {
    let users = (0..rng.random_range(1..8))
        .map(|u| {
            let mut pool: Vec<u32> = (0..n_items).collect();
            let mut recs = Vec::new();
            for _ in 0..rng.random_range(1..=8) {
                recs.push(pool.swap_remove(rng.random_range(0..pool.len())));
            }
            let m = rng.random_range(1..=max_m);
            let mut rel = BTreeSet::new();
            while rel.len() < m {
                rel.insert(rng.random_range(0..n_items));
            }
            eval_user(u, &recs, &rel.into_iter().collect::<Vec<_>>())
        })
        .collect();
    eval_set(users, n_items)
}

fn map_equals_mar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut unequal = 0;
    let mut unequal_alt = 0;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(3..=8);
        let set = random_eval_set(&mut rng, 15, k);
        let map = map_at_k(&set, k).unwrap();
        let mar = mar_at_k(&set, k, RecallConvention::RecallWeighted).unwrap();
        let alt = mar_at_k(&set, k, RecallConvention::PrecisionWeighted).unwrap();
        if (map - mar).abs() > 1e-9 {
            unequal += 1;
            worst = worst.max((map - mar).abs());
        }
        if (map - alt).abs() > 1e-9 {
            unequal_alt += 1;
        }
    }
    let detail = format!(
        "{unequal}/200 sets differ under the recall-weighted MAR (max gap {worst:.4}); \
         precision-weighted MAR differs on {unequal_alt}/200"
    );
    if unequal == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn damped_mean() -> Outcome {
    let start = Instant::now();
    let empty = PopularityStats::default();
    let g = empty.global_mean();
    ensure(empty.damped_mean(ItemId(0), 5.0).unwrap() == g, || "n=0 is not the global mean".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let ratings: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=5.0)).collect();
        let mut stats = PopularityStats::from_ratings(ratings.iter().map(|&r| (ItemId(0), r)));
        stats.prior = Some(rng.random_range(0.0..=5.0));
        let g = stats.global_mean();
        let plain = ratings.iter().sum::<f64>() / n as f64;
        let dm = |k: f64| stats.damped_mean(ItemId(0), k).unwrap();
        ensure((dm(0.0) - plain).abs() < 1e-9, || "k=0 is not the plain mean".into())?;
        ensure((dm(1e12) - g).abs() < 1e-9, || format!("k=1e12 gives {} not {g}", dm(1e12)))?;
        let mut prev_gap = f64::INFINITY;
        for k in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 1000.0] {
            let v = dm(k);
            let (lo, hi) = (plain.min(g), plain.max(g));
            ensure(v >= lo - 1e-12 && v <= hi + 1e-12, || format!("damped mean {v} outside [{lo}, {hi}]"))?;
            let gap = (v - g).abs();
            ensure(gap <= prev_gap + 1e-12, || "distance to the prior grew with k".into())?;
            prev_gap = gap;
        }
        // a new top rating never lowers the damped mean
        let before = dm(5.0);
        let mut more = stats.clone();
        more.add(ItemId(0), 5.0);
        ensure(more.damped_mean(ItemId(0), 5.0).unwrap() >= before - 1e-12, || "adding a 5 lowered the mean".into())?;
    }
    within(start, Duration::from_secs(5))?;
    Ok("limits and monotonicity over 1000 sets".into())
}

fn random_model(rng: &mut ChaCha8Rng, n_features: usize, n_fields: usize, d: usize) -> FfmModel {
    let mut m = FfmModel::zeros(n_features, n_fields, d).unwrap();
    m.w0 = rng.random_range(-0.5..0.5);
    for x in m.w.iter_mut().chain(m.v.iter_mut()) {
        *x = rng.random_range(-0.5..0.5);
    }
    m
}

fn ffm_correctness() -> Outcome {
    let start = Instant::now();
    // (a) hand example
    let mut m = FfmModel::zeros(3, 2, 2).unwrap();
    m.w0 = 0.1;
    m.w[1] = 0.2;
    m.w[2] = 0.3;
    m.latent_mut(1, 1).copy_from_slice(&[0.1, 0.2]);
    m.latent_mut(2, 0).copy_from_slice(&[0.3, 0.4]);
    let (y, _) = ffm_predict(&m, &[FfmTriple::new(0, 1, 1.0), FfmTriple::new(1, 2, 1.0)]).unwrap();
    ensure((y - 0.71).abs() < 1e-12, || format!("hand example gives {y}"))?;

    // (b) analytic vs central finite differences
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let lambda = 0.01;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let model = random_model(&mut rng, 6, 3, 3);
        let triples: Vec<FfmTriple> = (0..3)
            .map(|f| FfmTriple::new(f, f * 2 + rng.random_range(0..2), rng.random_range(0.5..1.5)))
            .collect();
        let ex = FfmExample::new(rng.random_range(0..2), triples);
        let g = example_gradient(&model, &ex, lambda).unwrap();
        let h = 1e-6;
        let mut check = |analytic: f64, bump: &dyn Fn(&mut FfmModel, f64)| -> Result<(), String> {
            let mut p = model.clone();
            bump(&mut p, h);
            let mut q = model.clone();
            bump(&mut q, -h);
            let numeric = (example_loss(&p, &ex, lambda).unwrap() - example_loss(&q, &ex, lambda).unwrap()) / (2.0 * h);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            ensure(rel < 1e-4, || format!("gradient {analytic} vs numeric {numeric}"))
        };
        for (&i, &gi) in &g.w {
            check(gi, &|m: &mut FfmModel, h| m.w[i] += h)?;
        }
        for (&(feature, field), gv) in &g.v {
            for (c, &gc) in gv.iter().enumerate() {
                check(gc, &|m: &mut FfmModel, h| m.latent_mut(feature, field)[c] += h)?;
            }
        }
    }

    // (c) one field: FFM equals an FM computed with the O(kn) identity
    for _ in 0..20 {
        let model = random_model(&mut rng, 8, 1, 4);
        let triples: Vec<FfmTriple> =
            (0..5).map(|f| FfmTriple::new(0, f, rng.random_range(-2.0..2.0))).collect();
        let (ffm, _) = ffm_predict(&model, &triples).unwrap();
        let mut fm = model.w0 + triples.iter().map(|t| model.w[t.feature as usize] * t.value).sum::<f64>();
        for c in 0..4 {
            let s: f64 = triples.iter().map(|t| model.latent(t.feature as usize, 0)[c] * t.value).sum();
            let s2: f64 = triples.iter().map(|t| (model.latent(t.feature as usize, 0)[c] * t.value).powi(2)).sum();
            fm += 0.5 * (s * s - s2);
        }
        ensure((ffm - fm).abs() < 1e-12, || format!("single-field FFM {ffm} vs FM {fm}"))?;
    }

    // (d) XOR: the interaction term is required
    let mut xor = Vec::new();
    for _ in 0..50 {
        for a in 0..2u32 {
            for b in 0..2u32 {
                xor.push(FfmExample::new(
                    (a ^ b) as u8,
                    vec![FfmTriple::new(0, a, 1.0), FfmTriple::new(1, 2 + b, 1.0)],
                ));
            }
        }
    }
    let cfg = TrainConfig { d: 4, learning_rate: 0.2, lambda: 0.0, epochs: 60, seed: 1, init_scale: 1.0, ..Default::default() };
    let (model, _) = ffm_train(&xor, None, &cfg).map_err(|e| e.to_string())?;
    let loss = mean_logloss(&model, &xor).unwrap();
    // zero latent init keeps latent gradients at zero: a linear-only model
    let (linear, _) = ffm_train(&xor, None, &TrainConfig { init_scale: 0.0, ..cfg }).map_err(|e| e.to_string())?;
    let floor = mean_logloss(&linear, &xor).unwrap();
    ensure(loss < 0.2, || format!("XOR logloss {loss}"))?;
    ensure(floor >= 0.69, || format!("linear floor {floor}"))?;

    within(start, Duration::from_secs(10))?;
    Ok(format!("max FD rel err {worst:.2e}, XOR logloss {loss:.4} vs linear {floor:.4}"))
}

fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, f64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let c2 = |n: f64| n * (n - 1.0) / 2.0;
    let index: f64 = table.values().map(|&n| c2(n)).sum();
    let sa: f64 = ra.values().map(|&n| c2(n)).sum();
    let sb: f64 = rb.values().map(|&n| c2(n)).sum();
    let expected = sa * sb / c2(a.len() as f64);
    let max = 0.5 * (sa + sb);
    (index - expected) / (max - expected)
}

/// Three mixed-type blobs with ordinal jitter and occasional nominal flips.
fn three_blobs(n_per: u32, seed: u64) -> (Vec<UserRecord>, Vec<usize>) {
    let protos = [
        ([1u8, 1, 1, 1], ["Male", "blue collar", "South Europe", "1Adlt"]),
        ([3, 2, 2, 2], ["Female", "white collar", "Asia", "2Adlt+Child"]),
        ([5, 4, 3, 4], ["Male", "white collar", "North America", "GrpFriends"]),
    ];
    let levels = [5u8, 4, 3, 4];
    let vocab: [&[&str]; 4] = [&GENDERS, &JOBS, &REGIONS, &GROUP_COMPS];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = Vec::new();
    let mut truth = Vec::new();
    for (c, (ord, nom)) in protos.iter().enumerate() {
        for j in 0..n_per {
            let mut o = *ord;
            for (x, &l) in o.iter_mut().zip(&levels) {
                if rng.random_bool(0.2) {
                    *x = if *x == l || (*x > 1 && rng.random_bool(0.5)) { *x - 1 } else { *x + 1 };
                }
            }
            let mut n: Vec<&str> = nom.to_vec();
            for (x, v) in n.iter_mut().zip(vocab) {
                if rng.random_bool(0.1) {
                    *x = v[rng.random_range(0..v.len())];
                }
            }
            users.push(UserRecord {
                id: UserId(c as u32 * n_per + j),
                age: o[0],
                ac_deg: o[1],
                budget: o[2],
                accom: o[3],
                gender: n[0].into(),
                job: n[1].into(),
                region: n[2].into(),
                group_comp: n[3].into(),
            });
            truth.push(c);
        }
    }
    (users, truth)
}

fn kprototypes() -> Outcome {
    let start = Instant::now();
    let (users, truth) = three_blobs(100, 21);
    for seed in 0..50 {
        let cfg = ClusterConfig { seed, n_init: 1, ..Default::default() };
        let m = kprototypes_fit(&users, 3, &cfg).map_err(|e| e.to_string())?;
        ensure(m.cost_history.windows(2).all(|w| w[1] <= w[0] + 1e-9), || {
            format!("seed {seed}: cost increased {:?}", m.cost_history)
        })?;
    }
    let m = kprototypes_fit(&users, 3, &ClusterConfig::default()).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = users.iter().map(|u| m.assignments[&u.id]).collect();
    let ari = adjusted_rand(&truth, &labels);
    ensure(ari >= 0.9, || format!("ARI {ari:.4}"))?;
    let (k, costs) = choose_k(&users, 1, 8, &ClusterConfig::default()).map_err(|e| e.to_string())?;
    ensure(k == 3, || format!("choose_k picked {k} from {costs:?}"))?;
    within(start, Duration::from_secs(5))?;
    Ok(format!("ARI {ari:.4}, k = {k}"))
}

fn phase_protocol() -> Outcome {
    let start = Instant::now();
    let plan = SimulationPlan::default();
    let res = run_simulation(&plan, &OntologyGraph::fixture(), &EngineConfig::default()).map_err(|e| e.to_string())?;
    let phases: Vec<u8> = res.iter().map(|r| r.phase).collect();
    ensure(phases == vec![1, 2, 3, 4, 4], || format!("phases {phases:?}"))?;
    let get = |i: usize, kind| res[i].report(kind).ok_or_else(|| format!("no {kind:?} report at milestone {i}"));
    let (h3, d3) = (get(2, RecommenderKind::Hybrid)?, get(2, RecommenderKind::Demographic)?);
    ensure(d3.personalization > h3.personalization, || {
        format!("198/191 personalization Demog {:.3} <= Hybrid {:.3}", d3.personalization, h3.personalization)
    })?;
    ensure(d3.coverage > h3.coverage, || {
        format!("198/191 coverage Demog {:.3} <= Hybrid {:.3}", d3.coverage, h3.coverage)
    })?;
    let (h, d, c) = (
        get(4, RecommenderKind::Hybrid)?,
        get(4, RecommenderKind::Demographic)?,
        get(4, RecommenderKind::Collaborative)?,
    );
    ensure(d.coverage > h.coverage && c.coverage > h.coverage, || {
        format!("1000/883 coverage Demog {:.3} Collab {:.3} Hybrid {:.3}", d.coverage, c.coverage, h.coverage)
    })?;
    ensure(c.personalization > h.personalization, || {
        format!("1000/883 personalization Collab {:.3} <= Hybrid {:.3}", c.personalization, h.personalization)
    })?;
    within(start, Duration::from_secs(120))?;
    Ok(format!(
        "phases {phases:?}; 198/191 pers D {:.2} > H {:.2}, cov D {:.2} > H {:.2}; \
         1000/883 cov D {:.2} C {:.2} > H {:.2}, pers C {:.2} > H {:.2}; {:.1?}",
        d3.personalization,
        h3.personalization,
        d3.coverage,
        h3.coverage,
        d.coverage,
        c.coverage,
        h.coverage,
        c.personalization,
        h.personalization,
        start.elapsed()
    ))
}

fn populated_engine(n_users: usize) -> Result<Engine, String> {
    let g = OntologyGraph::fixture();
    let mut engine = Engine::new(g.clone(), EngineConfig::default()).map_err(|e| e.to_string())?;
    let gen = GenConfig { n_users, ..Default::default() };
    let users = gen_users(&gen).map_err(|e| e.to_string())?;
    let prefs = gen_latent_prefs(&users, &gen).map_err(|e| e.to_string())?;
    for (u, p) in users.into_iter().zip(&prefs) {
        engine
            .apply(&Event::UserCreated { user: u, selection: Some(hl_selection(p, &g)) })
            .map_err(|e| e.to_string())?;
    }
    Ok(engine)
}

fn content_cold_start() -> Outcome {
    let mut engine = populated_engine(98)?;
    let selection: Vec<f64> = engine.matrices().hl_labels.iter().map(|h| f64::from(h == "Leisure")).collect();
    engine
        .apply(&Event::PreferencesSet { user: UserId(0), selection })
        .map_err(|e| e.to_string())?;
    ensure(engine.state().phase == 1, || format!("phase {}", engine.state().phase))?;
    let list = engine.recommend(UserId(0), &RequestContext::default(), 5).map_err(|e| e.to_string())?;
    ensure(list.items.len() == 5, || format!("{} items", list.items.len()))?;
    for r in &list.items {
        let hl = engine.graph().item_hl_classes(r.item);
        ensure(hl.contains("Leisure"), || format!("item {} is not Leisure-linked ({hl:?})", r.item))?;
    }
    Ok(format!("top-5 {:?}", list.item_ids().iter().map(|i| i.0).collect::<Vec<_>>()))
}

fn trickle_up() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("events.log");
    let (mut log, _) = EventLog::open(&path).map_err(|e| e.to_string())?;
    let g = OntologyGraph::fixture();
    let mut engine = Engine::new(g.clone(), EngineConfig::default()).map_err(|e| e.to_string())?;
    let all = vec![1.0; engine.matrices().hl_labels.len()];
    let user = UserRecord::new(0, 35, 3, 2, 2, "Female", "white collar", "Asia", "2Adlt").map_err(|e| e.to_string())?;
    let mut events = vec![Event::UserCreated { user, selection: Some(all) }];
    let item = ItemId(6);
    events.push(Event::Feedback { event: FeedbackEvent::new(UserId(0), item, FeedbackKind::Dismiss) });
    let cfg = engine.config.preferences;
    let mut before = None;
    for (i, ev) in events.iter().enumerate() {
        if i == 1 {
            before = Some(engine.preferences(UserId(0)).unwrap().clone());
        }
        engine.apply(ev).map_err(|e| e.to_string())?;
        log.append(ev.clone(), i as i64).map_err(|e| e.to_string())?;
    }
    let before = before.unwrap();
    let after = engine.preferences(UserId(0)).unwrap();
    let m = engine.matrices();
    let classes: Vec<usize> = g.item_classes(item).iter().map(|c| m.ll_index(c).unwrap()).collect();
    let parents: BTreeSet<usize> = classes.iter().flat_map(|&l| m.hl_ll.col(l)).collect();
    ensure(!classes.is_empty(), || "item has no LL class".into())?;
    for l in 0..m.ll_labels.len() {
        let want = if classes.contains(&l) { before.p_ll[l] - cfg.eta_ll } else { before.p_ll[l] };
        ensure(before.p_ll[l] >= cfg.eta_ll, || "pre-state would clamp".into())?;
        ensure(after.p_ll[l] == want, || format!("LL {} moved {} -> {}", m.ll_labels[l], before.p_ll[l], after.p_ll[l]))?;
    }
    for h in 0..m.hl_labels.len() {
        let want = if parents.contains(&h) { before.p_hl[h] - cfg.eta_hl } else { before.p_hl[h] };
        ensure(after.p_hl[h] == want, || format!("HL {} moved {} -> {}", m.hl_labels[h], before.p_hl[h], after.p_hl[h]))?;
    }
    drop(log);
    let (_, records) = EventLog::open(&path).map_err(|e| e.to_string())?;
    let replayed = restore(g, EngineConfig::default(), None, &records).map_err(|e| e.to_string())?;
    let a = serde_json::to_string(engine.state()).unwrap();
    let b = serde_json::to_string(replayed.state()).unwrap();
    ensure(a == b, || "replayed state differs".into())?;
    Ok(format!("{} LL and {} HL components moved by exactly -eta; replay byte-identical", classes.len(), parents.len()))
}

fn context_graph(rng: &mut ChaCha8Rng) -> OntologyGraph {
    let classes: String = OntologyGraph::fixture_document()
        .lines()
        .filter(|l| l.starts_with("C\t"))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut g = load_ontology(&classes).unwrap();
    for item in OntologyGraph::fixture().items() {
        let mut it: ItemRecord = item.clone();
        if rng.random_bool(0.8) {
            it.location = Some(GeoPoint::new(38.0 + rng.random_range(0.0..1.5), -9.5 + rng.random_range(0.0..1.5)).unwrap());
        }
        g.add_item(it).unwrap();
    }
    g
}

fn context_suite() -> Outcome {
    let params = ContextParams::default();
    let tau = params.tau_seconds("Beach");
    let w = repetition_willingness("Beach", Some(tau), &params);
    ensure((w - (1.0 - (-1.0f64).exp())).abs() < 1e-12, || format!("willingness at tau {w}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = context_graph(&mut rng);
    let all = g.item_ids();
    for round in 0..1000 {
        let scored: Vec<(ItemId, f64)> = all.iter().map(|&i| (i, rng.random_range(0.0..1.0))).collect();
        let mut p = ContextParams::default();
        if round % 2 == 0 {
            p.location = LocationMode::Decay { scale_km: rng.random_range(5.0..50.0) };
        }
        let now = 1_700_000_000i64;
        let history = (0..rng.random_range(0..6))
            .map(|_| (all[rng.random_range(0..all.len())], now - rng.random_range(0..90 * 86_400)))
            .collect();
        let ctx = ContextState {
            hotel: rng.random_bool(0.7).then(|| GeoPoint::new(38.7, -8.9).unwrap()),
            weather: [None, Some(Weather::Sunny), Some(Weather::Cloudy), Some(Weather::Rainy)][rng.random_range(0..4)],
            now,
            history,
        };
        let out = apply_context(&scored, &g, &ctx, &p).map_err(|e| e.to_string())?;
        let original: BTreeMap<ItemId, f64> = scored.iter().copied().collect();
        for (i, s) in out {
            ensure(s <= original[&i], || format!("item {i} score rose {} -> {s}", original[&i]))?;
        }
        let radius = rng.random_range(1.0..100.0);
        let hotel = GeoPoint::new(38.7, -8.9).unwrap();
        let once = location_filter(&all, &g, hotel, radius).map_err(|e| e.to_string())?;
        let twice = location_filter(&once, &g, hotel, radius).map_err(|e| e.to_string())?;
        ensure(once == twice, || "location filter is not idempotent".into())?;
    }
    Ok(format!("willingness(tau) = {w:.12}; 1000 random score sets"))
}

fn random_log(rng: &mut ChaCha8Rng, len: usize) -> Vec<EventLogRecord> {
    let mut events = Vec::new();
    let mut n_users = 0u32;
    let mut next_item = 1000u32;
    let hl = OntologyGraph::fixture().hl_count();
    for _ in 0..len {
        let roll = rng.random_range(0..100);
        let ev = if n_users == 0 || roll < 25 {
            let user = UserRecord {
                id: UserId(n_users),
                age: rng.random_range(1..=5),
                ac_deg: rng.random_range(1..=4),
                budget: rng.random_range(1..=3),
                accom: rng.random_range(1..=4),
                gender: GENDERS[rng.random_range(0..2)].into(),
                job: JOBS[rng.random_range(0..2)].into(),
                region: REGIONS[rng.random_range(0..REGIONS.len())].into(),
                group_comp: GROUP_COMPS[rng.random_range(0..4)].into(),
            };
            n_users += 1;
            let selection = rng.random_bool(0.8).then(|| (0..hl).map(|_| f64::from(rng.random_bool(0.4))).collect());
            Event::UserCreated { user, selection }
        } else if roll < 30 {
            Event::PreferencesSet {
                user: UserId(rng.random_range(0..n_users)),
                selection: (0..hl).map(|_| f64::from(rng.random_bool(0.4))).collect(),
            }
        } else if roll < 55 {
            let kind = [FeedbackKind::Book, FeedbackKind::Bookmark, FeedbackKind::Dismiss][rng.random_range(0..3)];
            let mut event = FeedbackEvent::new(UserId(rng.random_range(0..n_users)), ItemId(rng.random_range(0..29)), kind);
            event.timestamp = rng.random_range(0..1_000_000);
            Event::Feedback { event }
        } else if roll < 97 {
            Event::Rating {
                user: UserId(rng.random_range(0..n_users)),
                item: ItemId(rng.random_range(0..29)),
                rating: (rng.random_range(1.0..=5.0f64) * 100.0).round() / 100.0,
                timestamp: rng.random_range(0..1_000_000),
            }
        } else {
            let mut item = ItemRecord::new(next_item, format!("added offer {next_item}"));
            next_item += 1;
            item.categories = Some(vec![["Wellness", "Golf", "Beach", "Culture"][rng.random_range(0..4)].into()]);
            Event::ItemAdded { item, links: None }
        };
        events.push(ev);
    }
    events
        .into_iter()
        .enumerate()
        .map(|(i, event)| EventLogRecord { seq: i as u64 + 1, timestamp: i as i64, event })
        .collect()
}

fn event_sourcing() -> Outcome {
    let cfg = EngineConfig {
        phase: PhaseConfig {
            p3_min_users: 8,
            p3_min_ratings: 8,
            p4_min_users: 12,
            p4_min_density: 0.02,
            ..Default::default()
        },
        retrain_users_every: 5,
        retrain_ratings_every: 5,
        train: TrainConfig { epochs: 3, ..Default::default() },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let g = OntologyGraph::fixture();
    let mut phase4 = 0;
    for round in 0..100 {
        let len = rng.random_range(1..80);
        let log = random_log(&mut rng, len);
        let full = restore(g.clone(), cfg.clone(), None, &log).map_err(|e| format!("log {round}: {e}"))?;
        let cut = rng.random_range(0..=log.len());
        let head = restore(g.clone(), cfg.clone(), None, &log[..cut]).map_err(|e| e.to_string())?;
        let snap = Snapshot::from_json(&Snapshot::capture(&head, cut as u64).unwrap().to_json().unwrap())
            .map_err(|e| e.to_string())?;
        let resumed = restore(g.clone(), cfg.clone(), Some(snap), &log).map_err(|e| e.to_string())?;
        let a = serde_json::to_string(full.state()).unwrap();
        let b = serde_json::to_string(resumed.state()).unwrap();
        ensure(a == b, || format!("log {round}: snapshot at {cut} + tail differs from full replay"))?;
        if let Some(u) = full.state().users.keys().next() {
            let x = full.recommend(*u, &RequestContext::default(), 5).map_err(|e| e.to_string())?;
            let y = resumed.recommend(*u, &RequestContext::default(), 5).map_err(|e| e.to_string())?;
            ensure(x == y, || format!("log {round}: recommendations differ"))?;
        }
        phase4 += usize::from(full.state().phase == 4);
    }
    Ok(format!("100 logs, {phase4} reached phase 4"))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("metric oracle suite", metric_oracles),
        ("MAP@K equals MAR@K when m <= K", map_equals_mar),
        ("damped mean limits and monotonicity", damped_mean),
        ("FFM correctness", ffm_correctness),
        ("K-Prototypes", kprototypes),
        ("phase protocol reproduction", phase_protocol),
        ("content cold-start", content_cold_start),
        ("trickle-up and replay", trickle_up),
        ("context suite", context_suite),
        ("event-sourcing equivalence", event_sourcing),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
