//! Property tests for numeric and analysis invariants.

use proptest::prelude::*;

use sahr::analysis::{diagonality, edit_distance_wer, head_similarity, mapsswe, PrunePlan, Provenance, SegmentErrors};
use sahr::attention::{read_dump, write_dump, AttnMatrix, DumpRecord, Site};
use sahr::model::{decode_checkpoint, encode_checkpoint};
use sahr::objectives::ctc_loss_value;
use sahr::params::{average, ParamStore};
use sahr::{Graph, Tensor};

fn softmax_of(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[rows, cols], data.to_vec()).unwrap());
    let y = g.softmax_rows(x, 1.0).unwrap();
    g.value(y).data().to_vec()
}

fn stochastic(n: usize, m: usize) -> impl Strategy<Value = AttnMatrix> {
    prop::collection::vec(0.0f64..1.0, n * m).prop_map(move |mut v| {
        for r in 0..n {
            let row = &mut v[r * m..(r + 1) * m];
            row[0] += 1e-3;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        AttnMatrix::new(n, m, v).unwrap()
    })
}

fn brute_force_ctc(lp: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (t, v) = (lp.rows(), lp.last_dim());
    let mut total = 0.0;
    for code in 0..v.pow(t as u32) {
        let path: Vec<usize> = (0..t).map(|i| code / v.pow(i as u32) % v).collect();
        let mut collapsed = Vec::new();
        for (i, &s) in path.iter().enumerate() {
            if s != 0 && (i == 0 || path[i - 1] != s) {
                collapsed.push(s);
            }
        }
        if collapsed == labels {
            total += path.iter().enumerate().map(|(i, &s)| lp.at(i, s)).sum::<f64>().exp();
        }
    }
    total
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        (rows, cols, data, shift) in (1usize..5, 1usize..6)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-20.0f64..20.0, r * c), -50.0f64..50.0))
    ) {
        let p = softmax_of(rows, cols, &data);
        for r in 0..rows {
            let s: f64 = p[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let q = softmax_of(rows, cols, &shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonality_lies_in_unit_interval(a in (1usize..7).prop_flat_map(|n| stochastic(n, n))) {
        let d = diagonality(&a).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn similarity_ignores_head_order(
        heads in (1usize..5, 1usize..5).prop_flat_map(|(n, m)| prop::collection::vec(stochastic(n, m), 2..5))
    ) {
        let fwd = DumpRecord::new(Site::EncoderSelf, 0, heads.clone()).unwrap();
        let mut rev = heads;
        rev.reverse();
        let rev = DumpRecord::new(Site::EncoderSelf, 0, rev).unwrap();
        let a = head_similarity(&[fwd]).unwrap().mean;
        let b = head_similarity(&[rev]).unwrap().mean;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn ctc_matches_enumeration(
        (v, t, labels, logits) in (1usize..=3, 1usize..=6).prop_flat_map(|(v, t)| {
            let labels = if v == 1 {
                Just(Vec::new()).boxed()
            } else {
                prop::collection::vec(1..v, 0..=3).boxed()
            };
            (Just(v), Just(t), labels, prop::collection::vec(-3.0f64..3.0, t * v))
        })
    ) {
        let lp = Tensor::from_fn(&[t, v], |k| {
            let row = &logits[(k / v) * v..(k / v + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            row[k % v] - z.ln()
        });
        let brute = brute_force_ctc(&lp, &labels);
        match ctc_loss_value(&lp, &labels) {
            Ok((loss, _)) => prop_assert!((loss + brute.ln()).abs() < 1e-8, "dp {} brute {}", loss, -brute.ln()),
            Err(_) => prop_assert_eq!(brute, 0.0),
        }
    }

    #[test]
    fn mapsswe_swap_negates_z(a in prop::collection::vec(0u8..6, 2..30), b in prop::collection::vec(0u8..6, 2..30)) {
        let k = a.len().min(b.len());
        let sa = SegmentErrors::new(a[..k].iter().map(|&x| f64::from(x)).collect());
        let sb = SegmentErrors::new(b[..k].iter().map(|&x| f64::from(x)).collect());
        let ab = mapsswe(&sa, &sb).unwrap();
        let ba = mapsswe(&sb, &sa).unwrap();
        prop_assert_eq!(ab.z, -ba.z);
        prop_assert_eq!(ab.p, ba.p);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }

    #[test]
    fn average_matches_elementwise_mean(
        snaps in (1usize..6, 1usize..8).prop_flat_map(|(k, n)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, n), k))
    ) {
        let stores: Vec<ParamStore<f64>> = snaps
            .iter()
            .map(|v| {
                let mut s = ParamStore::new();
                s.insert("w", Tensor::new(&[v.len()], v.clone()).unwrap());
                s
            })
            .collect();
        let avg = average(&stores).unwrap();
        let got = avg.tensors()[0].data();
        for (i, g) in got.iter().enumerate() {
            let oracle = snaps.iter().map(|v| v[i]).sum::<f64>() / snaps.len() as f64;
            prop_assert!((g - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn wer_is_zero_only_for_equal_sequences(r in prop::collection::vec(0u8..4, 1..8), h in prop::collection::vec(0u8..4, 0..8)) {
        let w = edit_distance_wer(&r, &h);
        prop_assert_eq!(w.errors() == 0, r == h);
        prop_assert!(w.errors() >= r.len().abs_diff(h.len()));
        prop_assert!(w.errors() <= r.len().max(h.len()));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(values in prop::collection::vec(prop::num::f64::ANY, 1..20), rows in 1usize..4) {
        let mut s = ParamStore::new();
        s.insert("a.b", Tensor::new(&[values.len()], values.clone()).unwrap());
        s.insert("z", Tensor::zeros(&[rows, 2]));
        let back: ParamStore<f64> = decode_checkpoint(&encode_checkpoint(&s).unwrap()).unwrap();
        let bits: Vec<u64> = back.tensors()[0].data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.tensors()[1].shape(), &[rows, 2]);
    }

    #[test]
    fn prune_plan_text_round_trips(keep in (1usize..6, 1usize..6).prop_flat_map(|(l, h)| prop::collection::vec(prop::collection::vec(any::<bool>(), h), l))) {
        let plan = PrunePlan { site: Site::DecoderInter, keep, provenance: Provenance::Threshold(0.9) };
        prop_assert_eq!(PrunePlan::parse(&plan.to_text()).unwrap(), plan);
    }

    #[test]
    fn dump_round_trip(heads in (1usize..4, 1usize..4).prop_flat_map(|(n, m)| prop::collection::vec(stochastic(n, m), 1..4)), layer in 0usize..5) {
        let rec = vec![DumpRecord::new(Site::DecoderSelf, layer, heads).unwrap()];
        let mut buf = Vec::new();
        write_dump(&mut buf, &rec).unwrap();
        prop_assert_eq!(read_dump(&buf).unwrap(), rec);
    }
}
