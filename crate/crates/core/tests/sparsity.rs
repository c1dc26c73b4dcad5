mod support;

use ptskit_core::nn::build_preset;
use ptskit_core::sparsity::export::{export_masks, import_masks, pack_bits, unpack_bits};
use ptskit_core::sparsity::{
    apply_mask, erk_distribution, erk_rates, global_sparsity, nm_mask, topk_mask, uniform_distribution, uniform_rates,
    NmPattern, SparseMask, SparsityDistribution,
};
use ptskit_core::{Error, Tensor};
use support::fixtures::*;

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec())
}

#[test]
fn topk_examples() {
    let w = t(&[0.5, -0.3, 0.1, 0.9]);
    assert_eq!(topk_mask(&w, 0.5).data(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(topk_mask(&w, 0.0).data(), &[1.0; 4]);
    assert_eq!(topk_mask(&w, 1.0).data(), &[0.0; 4]);
    // ties resolve toward the lower index
    assert_eq!(topk_mask(&t(&[1.0, -1.0, 1.0, 0.5]), 0.5).data(), &[1.0, 1.0, 0.0, 0.0]);
    // floor: 3 weights at rate 0.5 keep one
    assert_eq!(topk_mask(&t(&[0.2, 0.4, 0.3]), 0.5).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn nm_examples() {
    let p = NmPattern::new(2, 4).unwrap();
    assert_eq!(nm_mask(&t(&[1.0, 2.0, 3.0, 4.0]), p).data(), &[0.0, 0.0, 1.0, 1.0]);
    assert_eq!(nm_mask(&t(&[-5.0, 1.0, -4.0, 2.0]), p).data(), &[1.0, 0.0, 1.0, 0.0]);
    let mut r = rng(1);
    let w = normal_tensor(&[3, 2, 3, 3], &mut r);
    assert_eq!(nm_mask(&w, NmPattern::new(4, 4).unwrap()).data(), Tensor::ones(w.shape()).data());
    assert!(matches!(NmPattern::new(0, 4), Err(Error::InvalidPattern { .. })));
    assert!(matches!(NmPattern::new(5, 4), Err(Error::InvalidPattern { .. })));
    assert_eq!(NmPattern::parse("2:8").unwrap(), NmPattern::new(2, 8).unwrap());
    assert!(NmPattern::parse("2-4").is_err());
}

#[test]
fn nm_groups_run_along_the_reduction_axis() {
    // [out=2, in=1, 3, 3]: each output row is 9 weights, groups {0..4}, {4..8}, {8}
    let w = Tensor::new(vec![2, 1, 3, 3], (1..=18).map(f64::from).collect()).unwrap();
    let m = nm_mask(&w, NmPattern::new(2, 4).unwrap());
    let row = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    assert_eq!(&m.data()[..9], &row);
    assert_eq!(&m.data()[9..], &row);
}

#[test]
fn apply_mask_examples() {
    let mut r = rng(4);
    let w = normal_tensor(&[4, 5], &mut r);
    assert_eq!(apply_mask(&w, &Tensor::ones(&[4, 5])).unwrap(), w);
    assert_eq!(apply_mask(&w, &Tensor::zeros(&[4, 5])).unwrap().data(), &[0.0; 20]);
    let m = random_masks(&random_net(Arch::Mlp, 0), 0.5, &mut r);
    let w0 = normal_tensor(m.layer(0).shape(), &mut r);
    let got = apply_mask(&w0, m.layer(0)).unwrap();
    for i in 0..w0.numel() {
        let expected = if m.layer(0).data()[i] == 1.0 { w0.data()[i] } else { 0.0 };
        assert_eq!(got.data()[i], expected);
    }
    assert!(apply_mask(&w, &Tensor::ones(&[5, 4])).is_err());
}

#[test]
fn global_sparsity_counts() {
    let net = random_net(Arch::Mlp, 2);
    assert_eq!(global_sparsity(&net, &SparseMask::dense(&net)).unwrap(), 0.0);
    let zeros = SparseMask::new(net.prunable_weights().iter().map(|w| Tensor::zeros(w.shape())).collect()).unwrap();
    assert_eq!(global_sparsity(&net, &zeros).unwrap(), 1.0);
    // 60 + 30 weights; keep 6 in the first and 25 in the second
    let mut a = Tensor::zeros(&[10, 6]);
    a.data_mut()[..6].fill(1.0);
    let mut b = Tensor::zeros(&[3, 10]);
    b.data_mut()[..25].fill(1.0);
    let mixed = SparseMask::new(vec![a, b]).unwrap();
    assert!((global_sparsity(&net, &mixed).unwrap() - (1.0 - 31.0 / 90.0)).abs() < 1e-15);
}

#[test]
fn erk_examples() {
    let single = erk_rates(&[vec![20, 30]], 0.8, &[]).unwrap();
    assert!((single.rates[0] - 0.8).abs() < 1e-12);
    let twin = erk_rates(&[vec![16, 16], vec![16, 16]], 0.7, &[]).unwrap();
    assert!((twin.rates[0] - 0.7).abs() < 1e-12 && (twin.rates[1] - 0.7).abs() < 1e-12);
}

#[test]
fn erk_mlp3_matches_formula_oracle() {
    // density ∝ Σdims/Πdims, scaled to 10% density overall; the classifier's
    // raw density exceeds 1 and is frozen dense. Values from an independent
    // script evaluating the same formula.
    let net = build_preset("mlp3", &[784], 10, 0).unwrap();
    let d = erk_distribution(&net, 0.9).unwrap();
    let oracle = [0.9192344072460445, 0.8173455056179776, 0.0];
    for (r, o) in d.rates.iter().zip(oracle) {
        assert!((r - o).abs() < 1e-12, "{r} vs {o}");
    }
    assert!((d.induced_sparsity(&net.prunable_numels()) - 0.9).abs() < 1e-12);
}

#[test]
fn uniform_and_exclusions() {
    let net = build_preset("convnet-small", &[1, 28, 28], 10, 0).unwrap();
    let u = uniform_distribution(&net, 0.9).unwrap();
    assert!(u.rates.iter().all(|&r| r == 0.9));
    let numels = net.prunable_numels();
    let ex = uniform_rates(&numels, 0.9, &[0]).unwrap();
    assert_eq!(ex.rates[0], 0.0);
    assert!((ex.induced_sparsity(&numels) - 0.9).abs() < 1e-12);
    let ex = erk_rates(&net.prunable_weights().iter().map(|w| w.shape().to_vec()).collect::<Vec<_>>(), 0.9, &[0]).unwrap();
    assert_eq!(ex.rates[0], 0.0);
    assert!(uniform_rates(&numels, 0.9, &[2]).is_err());
    assert!((ex.induced_sparsity(&numels) - 0.9).abs() < 1e-12);
    assert!(SparsityDistribution::new(vec![1.2], 0.5).is_err());
}

#[test]
fn summary_round_trip() {
    let net = build_preset("convnet-small", &[1, 28, 28], 10, 0).unwrap();
    let d = erk_distribution(&net, 0.85).unwrap();
    let text = d.summary(&net);
    assert!(text.starts_with("# target 0.85\n"));
    assert_eq!(SparsityDistribution::parse_summary(&text).unwrap(), d);
    assert!(SparsityDistribution::parse_summary("layer kind\n0 conv2d 1 2 3 0.5\n").is_err());
}

#[test]
fn mask_export_round_trip() {
    let net = build_preset("convnet-small", &[1, 28, 28], 10, 0).unwrap();
    let masks = SparseMask::from_rates(&net, &[0.3, 0.9, 0.95]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = (0..3).map(|i| format!("layer{i}")).collect();
    export_masks(&masks, &names, dir.path()).unwrap();
    let (back, index) = import_masks(dir.path()).unwrap();
    assert_eq!(back, masks);
    assert_eq!(index.iter().map(|e| e.nnz).collect::<Vec<_>>(), masks.nnz());
    assert_eq!(index[1].shape, vec![16, 8, 3, 3]);
    // LSB-first packing
    let bits = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(pack_bits(&bits), vec![0b0000_1001, 0b1]);
    assert_eq!(unpack_bits(&pack_bits(&bits), &[9]).unwrap(), bits);
}
