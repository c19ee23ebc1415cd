use cestrade_core::participation::{
    build_cost_table, check_epsilon_nash, eut_expected_cost, expected_revenue, pt_expected_cost, pure_response_cost,
    run_dynamics, CostEntry, CostTable, DynamicsOptions, MixedProfile, Model, PtParams,
};
use cestrade_core::scenario::ActionProfile;
use cestrade_core::synthetic::{load_fixture, three_player_scenario, DEFAULT_Y0};
use proptest::prelude::*;

fn naive_weight(y: f64, alpha: f64) -> f64 {
    if y <= 0.0 {
        0.0
    } else {
        (-(-y.ln()).powf(alpha)).exp()
    }
}

fn naive_eut(n: usize, y: &[Vec<f64>], table: &CostTable) -> f64 {
    table.entries.iter().map(|e| e.costs[n] * e.choice.iter().enumerate().map(|(r, &c)| y[r][c]).product::<f64>()).sum()
}

fn naive_pt(n: usize, y: &[Vec<f64>], table: &CostTable, alpha: f64) -> f64 {
    table
        .entries
        .iter()
        .map(|e| {
            let mut w = y[n][e.choice[n]];
            for (r, &c) in e.choice.iter().enumerate() {
                if r != n {
                    w *= naive_weight(y[r][c], alpha);
                }
            }
            e.costs[n] * w
        })
        .sum()
}

fn naive_revenue(y: &[Vec<f64>], table: &CostTable) -> f64 {
    table.entries.iter().map(|e| e.revenue * e.choice.iter().enumerate().map(|(r, &c)| y[r][c]).product::<f64>()).sum()
}

/// Table with arbitrary payoffs over the given start counts.
fn random_table(radices: &[usize], values: &[f64]) -> CostTable {
    let players = radices.len();
    let count: usize = radices.iter().product();
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let mut rest = index;
        let mut choice = vec![0; players];
        for n in (0..players).rev() {
            choice[n] = rest % radices[n];
            rest /= radices[n];
        }
        let costs: Vec<f64> = (0..players).map(|n| values[(index * 7 + n * 3) % values.len()]).collect();
        entries.push(CostEntry {
            profile: ActionProfile(choice.iter().map(|c| c + 1).collect()),
            choice,
            costs,
            revenue: values[(index * 5 + 1) % values.len()],
            load: vec![1.0],
            par: Some(1.0),
        });
    }
    CostTable {
        participant_ids: (1..=players).collect(),
        starts: radices.iter().map(|&m| (1..=m).collect()).collect(),
        entries,
    }
}

fn normalise(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn fast_expectations_match_enumeration(
        radices in prop::collection::vec(1usize..4, 1..5),
        values in prop::collection::vec(-10.0f64..10.0, 31),
        raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 4),
        alpha in 0.05f64..=1.0,
    ) {
        let table = random_table(&radices, &values);
        prop_assume!(table.len() <= 81);
        let y: Vec<Vec<f64>> = radices
            .iter()
            .zip(&raw)
            .map(|(&m, r)| {
                let mut v: Vec<f64> = r[..m].iter().map(|x| x + 1e-3).collect();
                v = normalise(&v);
                v
            })
            .collect();
        let mixed = MixedProfile(y.clone());
        let pt = PtParams::uniform(alpha, radices.len());
        for n in 0..radices.len() {
            prop_assert!((eut_expected_cost(n, &mixed, &table) - naive_eut(n, &y, &table)).abs() <= 1e-10);
            prop_assert!((pt_expected_cost(n, &mixed, &table, &pt) - naive_pt(n, &y, &table, alpha)).abs() <= 1e-10);
        }
        prop_assert!((expected_revenue(&mixed, &table) - naive_revenue(&y, &table)).abs() <= 1e-10);
        let (lo, hi) = table.entries.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.revenue), hi.max(e.revenue)));
        let w = expected_revenue(&mixed, &table);
        prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
    }

    #[test]
    fn pt_equals_eut_at_alpha_one(
        radices in prop::collection::vec(1usize..4, 1..5),
        values in prop::collection::vec(-10.0f64..10.0, 31),
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 4),
    ) {
        let table = random_table(&radices, &values);
        let y = MixedProfile(radices.iter().zip(&raw).map(|(&m, r)| normalise(&r[..m])).collect());
        let pt = PtParams::uniform(1.0, radices.len());
        for n in 0..radices.len() {
            prop_assert!((pt_expected_cost(n, &y, &table, &pt) - eut_expected_cost(n, &y, &table)).abs() <= 1e-12);
        }
    }

    #[test]
    fn pure_opponents_make_pt_collapse_to_eut(
        values in prop::collection::vec(-10.0f64..10.0, 31),
        own in prop::collection::vec(0.01f64..1.0, 3),
        picks in prop::collection::vec(0usize..3, 2),
        alpha in 0.05f64..1.0,
    ) {
        let table = random_table(&[3, 3, 3], &values);
        let mut y = MixedProfile::pure(&table, &[0, picks[0], picks[1]]);
        y.0[0] = normalise(&own);
        let pt = PtParams::uniform(alpha, 3);
        prop_assert!((pt_expected_cost(0, &y, &table, &pt) - eut_expected_cost(0, &y, &table)).abs() <= 1e-12);
        // committing to one start is the degenerate expectation
        for c in 0..3 {
            let mut d = y.clone();
            d.0[0] = (0..3).map(|j| if j == c { 1.0 } else { 0.0 }).collect();
            prop_assert!((pure_response_cost(0, c, &y, &table, &Model::Eut) - eut_expected_cost(0, &d, &table)).abs() <= 1e-12);
        }
    }
}

/// Exhaustive deviation check written against the table directly.
fn naive_worst_deviation(y: &[Vec<f64>], table: &CostTable, alpha: Option<f64>) -> f64 {
    let players = table.players();
    let mut worst = 0.0f64;
    for n in 0..players {
        let expected = match alpha {
            None => naive_eut(n, y, table),
            Some(a) => naive_pt(n, y, table, a),
        };
        let mut best = f64::INFINITY;
        for c in 0..table.starts[n].len() {
            let mut dev = y.to_vec();
            dev[n] = (0..table.starts[n].len()).map(|j| if j == c { 1.0 } else { 0.0 }).collect();
            let v = match alpha {
                None => naive_eut(n, &dev, table),
                Some(a) => naive_pt(n, &dev, table, a),
            };
            best = best.min(v);
        }
        worst = worst.max(expected - best);
    }
    worst
}

#[test]
fn three_player_game_converges() {
    let s = three_player_scenario();
    assert_eq!(load_fixture("three_player").unwrap(), s);
    let table = build_cost_table(&s).unwrap();
    assert_eq!(table.len(), 27);
    let y0 = MixedProfile::repeated(&DEFAULT_Y0, 3);
    for alpha in [None, Some(0.1), Some(0.4), Some(0.7)] {
        let model = match alpha {
            None => Model::Eut,
            Some(a) => Model::Pt(PtParams::uniform(a, 3)),
        };
        let (y, trace) = run_dynamics(&table, &model, &y0, &DynamicsOptions::default()).unwrap();
        assert!(trace.converged_at.is_some());
        let report = check_epsilon_nash(&y, &table, &model, 1e-3);
        assert!(report.passed);
        let naive = naive_worst_deviation(&y.0, &table, alpha);
        assert!((naive - report.worst).abs() <= 1e-10);
        for it in &trace.iterates {
            for row in &it.0 {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|p| *p >= 0.0));
            }
        }
    }
}

#[test]
fn alpha_one_trace_is_the_eut_trace() {
    let s = three_player_scenario();
    let table = build_cost_table(&s).unwrap();
    let y0 = MixedProfile::repeated(&DEFAULT_Y0, 3);
    let opts = DynamicsOptions { max_iter: 300, eps: 0.0, ..DynamicsOptions::default() };
    let (_, eut) = run_dynamics(&table, &Model::Eut, &y0, &opts).unwrap();
    let (_, pt) = run_dynamics(&table, &Model::Pt(PtParams::uniform(1.0, 3)), &y0, &opts).unwrap();
    assert_eq!(eut.iterates, pt.iterates);
    assert_eq!(eut.iterates.len(), 301);
}

#[test]
fn table_guard_and_completeness() {
    let table = build_cost_table(&three_player_scenario()).unwrap();
    let mut seen: Vec<Vec<usize>> = table.entries.iter().map(|e| e.profile.0.clone()).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 27);
    for e in &table.entries {
        assert_eq!(table.entry(&e.profile), Some(e));
    }
    assert_eq!(table.entry(&ActionProfile(vec![2, 1, 1])), None);
}
