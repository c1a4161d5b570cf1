//! Metric, task weighting and the total objective.

mod common;

use common::loss_mechanics;
use nutrifuse_core::losses::{kpi, nutri_loss, pmae, renormalized, total_loss, ComparisonReport, PmaeReport, TaskWeights};
use nutrifuse_core::NutritionVector;
use nutrifuse_tensor::Tensor;
use proptest::prelude::*;

#[test]
fn mechanics_match_hand_values() {
    let m = loss_mechanics();
    assert_eq!(m.kpi_half, 2.0);
    assert!(m.fixed_point_moved < 1e-12);
    assert!(m.worst_contraction <= 1.0 + 1e-9, "contraction ratio {}", m.worst_contraction);
    assert!(m.distance_at_50 < 1e-6);
    assert!(m.pmae_error <= 1e-12);
}

#[test]
fn kpi_clamps_above_one() {
    assert_eq!(kpi(0.0), 1.0);
    assert!((kpi(1.5) - 1000.0).abs() < 1e-9);
    assert!((kpi(1.0) - 1000.0).abs() < 1e-9);
}

#[test]
fn degenerate_denominator_is_reported() {
    assert!(pmae(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    let zeros = Tensor::<f64>::zeros(&[2, 5]);
    assert!(nutri_loss(&zeros, &zeros, &TaskWeights::new(0.3).unwrap()).is_err());
}

fn targets() -> Tensor<f64> {
    Tensor::from_vec(&[2, 5], vec![100.0, 50.0, 5.0, 20.0, 8.0, 300.0, 150.0, 15.0, 40.0, 12.0]).unwrap()
}

#[test]
fn one_task_off_by_ten_percent_and_doubling_its_weight() {
    let t = targets();
    let mut p = t.to_vec();
    // calories mean is 200; both samples off by 20 => 10%
    p[0] += 20.0;
    p[5] -= 20.0;
    let p = Tensor::from_vec(&[2, 5], p).unwrap();
    let tw = TaskWeights::new(0.3).unwrap();
    assert!((nutri_loss(&p, &t, &tw).unwrap().item() - 0.1).abs() < 1e-12);
    assert_eq!(nutri_loss(&t, &t, &tw).unwrap().item(), 0.0);
    let mut doubled = tw.clone();
    doubled.w[0] = 2.0;
    assert!((nutri_loss(&p, &t, &doubled).unwrap().item() - 0.2).abs() < 1e-12);
}

#[test]
fn loss_with_unit_weights_is_the_sum_of_batch_pmaes() {
    let t = targets();
    let p = Tensor::from_vec(&[2, 5], vec![90.0, 70.0, 4.0, 25.0, 10.0, 310.0, 120.0, 18.0, 44.0, 9.0]).unwrap();
    let (tv, pv) = (t.to_vec(), p.to_vec());
    let per_task: Vec<f64> = (0..5)
        .map(|j| pmae(&[tv[j], tv[5 + j]], &[pv[j], pv[5 + j]]).unwrap())
        .collect();
    let loss = nutri_loss(&p, &t, &TaskWeights::new(0.3).unwrap()).unwrap().item();
    let mean = per_task.iter().sum::<f64>() / 5.0;
    assert!((loss / 5.0 - mean).abs() < 1e-12);
}

#[test]
fn total_loss_cases_and_gradient_split() {
    let nutri = Tensor::<f64>::scalar(1.0);
    let align = Tensor::<f64>::scalar(0.5);
    assert_eq!(total_loss(&nutri, Some(&align), 0.0).unwrap().item(), 1.0);
    assert_eq!(total_loss(&nutri, Some(&align), 1.0).unwrap().item(), 1.5);

    // d total / d x == d nutri / d x + lambda * d align / d x
    let x = Tensor::parameter(&[2, 5], vec![1.0, 2.0, 0.5, 3.0, 1.5, 2.0, 1.0, 0.7, 2.5, 1.0]).unwrap();
    let t = Tensor::from_vec(&[2, 5], vec![1.2, 1.5, 0.4, 3.3, 2.0, 1.8, 1.4, 0.6, 2.0, 1.1]).unwrap();
    let tw = TaskWeights::new(0.3).unwrap();
    let lambda = 0.37;
    let grad_of = |f: &dyn Fn() -> Tensor<f64>| {
        x.zero_grad();
        f().backward().unwrap();
        x.grad().unwrap()
    };
    let feats = |x: &Tensor<f64>| x.reshape(&[2, 5]).unwrap();
    let g_nutri = grad_of(&|| nutri_loss(&x, &t, &tw).unwrap());
    let g_align = grad_of(&|| nutrifuse_core::fusion::alignment_loss(&feats(&x), &t, 0.2).unwrap());
    let g_total = grad_of(&|| {
        let n = nutri_loss(&x, &t, &tw).unwrap();
        let a = nutrifuse_core::fusion::alignment_loss(&feats(&x), &t, 0.2).unwrap();
        total_loss(&n, Some(&a), lambda).unwrap()
    });
    for i in 0..10 {
        assert!((g_total[i] - (g_nutri[i] + lambda * g_align[i])).abs() < 1e-12);
    }
}

#[test]
fn report_oracles() {
    let truth: Vec<NutritionVector> =
        (0..6).map(|i| NutritionVector::from_array([100.0 + 30.0 * i as f64, 50.0 + i as f64, 4.0, 10.0 + i as f64, 7.0])).collect();
    let perfect = PmaeReport::from_predictions(&truth, &truth).unwrap();
    assert!(perfect.per_task.iter().all(|&v| v == 0.0) && perfect.mean == 0.0);

    // closed-form mean absolute deviation over the mean, in percent
    let mp = PmaeReport::mean_predictor(&truth).unwrap();
    for j in 0..5 {
        let col: Vec<f64> = truth.iter().map(|t| t.to_array()[j]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let mad = col.iter().map(|v| (v - mean).abs()).sum::<f64>() / col.len() as f64;
        assert!((mp.per_task[j] - 100.0 * mad / mean).abs() < 1e-9);
    }
    assert!((mp.mean - mp.per_task.iter().sum::<f64>() / 5.0).abs() < 1e-9);
    assert_eq!(PmaeReport::from_json(&mp.to_json()).unwrap(), mp);

    let cmp = ComparisonReport { rows: vec![("baseline".into(), mp.clone()), ("+FAFM".into(), perfect)] };
    assert_eq!(ComparisonReport::from_records(&cmp.to_records()).unwrap(), cmp);
    let table = cmp.table();
    assert!(table.contains("Calories") && table.contains("Protein") && table.contains("Mean"));
}

proptest! {
    #[test]
    fn pmae_is_scale_invariant(
        pairs in proptest::collection::vec((0.1f64..100.0, 0.0f64..100.0), 1..20),
        c in 0.01f64..100.0,
    ) {
        let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ts: Vec<f64> = t.iter().map(|v| v * c).collect();
        let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
        let a = pmae(&t, &p).unwrap();
        let b = pmae(&ts, &ps).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn weights_stay_positive_and_normalized(
        steps in proptest::collection::vec(proptest::array::uniform5(0.0f64..3.0), 1..30),
        alpha in 0.05f64..=1.0,
    ) {
        let mut tw = TaskWeights::new(alpha).unwrap();
        for pm in steps {
            tw.update(pm.map(kpi)).unwrap();
            prop_assert!(tw.w.iter().all(|&w| w > 0.0));
            prop_assert!((tw.w.iter().sum::<f64>() - 5.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_kpis_contract_geometrically(pm in proptest::array::uniform5(0.0f64..0.99), alpha in 0.05f64..=1.0) {
        let k = pm.map(kpi);
        let target = renormalized(k);
        let mut tw = TaskWeights::new(alpha).unwrap();
        let d = |w: &[f64; 5]| w.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let d0 = d(&tw.w);
        for t in 1..=30 {
            tw.update(k).unwrap();
            prop_assert!(d(&tw.w) <= (1.0 - alpha).powi(t) * d0 + 1e-12);
        }
    }
}
