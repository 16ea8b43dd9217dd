use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tenn_core::mimo::{
    cfp, cfp_graph, eval_schedule, gen_channels, greedy_schedule, mmse_precoder, precoder_from_columns,
    random_precoder, sum_rate, sum_rate_graph, wmmse, zf_precoder, AuxTensors, BaselinePrecoder, ChannelSample,
    SystemConfig, WmmseInit, WmmseOptions,
};
use tenn_core::{ComplexMatrix, Graph, Permutation};

type C = ComplexMatrix<f64>;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

fn samples(k: usize, n_r: usize, n_t: usize, snr: f64, n: usize, seed: u64) -> Vec<ChannelSample<f64>> {
    gen_channels(&SystemConfig::new(k, n_r, n_t).with_snr_db(snr), n, seed)
}

fn max_diff(a: &[C], b: &[C]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y).unwrap()).fold(0.0, f64::max)
}

#[test]
fn single_user_matched_filter_rate() {
    for s in samples(1, 1, 4, 10.0, 5, 1) {
        let h = &s.h[0];
        let norm2 = h.frobenius_sq();
        let w = vec![h.scale_real((s.p_t / norm2).sqrt())];
        let expect = (1.0 + s.p_t * norm2 / s.sigma2).log2();
        let (_, r) = sum_rate(&s, &w).unwrap();
        assert!((r - expect).abs() < 1e-12);
        let wm = wmmse(&s, &WmmseOptions::default()).unwrap();
        assert!((wm.solution.sum_rate - expect).abs() < 1e-6);
        // the closed form with A = U = 1 points along hᴴ
        let c = cfp(&s, &AuxTensors::identity(1, 1)).unwrap();
        let dot = c.w[0].matmul(&h.hermitian()).unwrap().get(0, 0).norm();
        let prod = c.w[0].frobenius_sq().sqrt() * norm2.sqrt();
        assert!((dot - prod).abs() <= 1e-9 * prod);
    }
}

#[test]
fn wmmse_trace_is_monotone() {
    for snr in [0.0, 10.0, 20.0, 30.0] {
        for s in samples(4, 2, 8, snr, 10, 3) {
            for init in [WmmseInit::Mmse, WmmseInit::Random(9)] {
                let r = wmmse(&s, &WmmseOptions { init, ..Default::default() }).unwrap();
                for w in r.trace.windows(2) {
                    assert!(w[1] >= w[0] - 1e-8, "snr {snr}: {} -> {}", w[0], w[1]);
                }
                assert!(r.solution.iterations <= 300);
            }
        }
    }
}

#[test]
fn zf_nulls_interference() {
    for s in samples(3, 2, 8, 10.0, 5, 4) {
        let sol = zf_precoder(&s).unwrap();
        let hnorm = s.stacked().frobenius_sq().sqrt();
        for k in 0..3 {
            for j in 0..3 {
                if j != k {
                    let leak = s.h[k].matmul(&sol.w[j].hermitian()).unwrap().frobenius_sq().sqrt();
                    assert!(leak <= 1e-8 * hnorm);
                }
            }
        }
    }
    assert!(zf_precoder(&samples(5, 2, 8, 10.0, 1, 0)[0]).is_err());
}

#[test]
fn mmse_tends_to_zf_at_high_snr() {
    for s in samples(3, 2, 8, 0.0, 3, 6) {
        let s = s.with_sigma2(1e-12);
        let d = max_diff(&mmse_precoder(&s).unwrap().w, &zf_precoder(&s).unwrap().w);
        assert!(d <= 1e-6, "{d}");
    }
}

#[test]
fn precoders_meet_power_budget() {
    for s in samples(4, 2, 8, 10.0, 5, 8) {
        let sols = [
            zf_precoder(&s).unwrap(),
            mmse_precoder(&s).unwrap(),
            wmmse(&s, &WmmseOptions::default()).unwrap().solution,
        ];
        for sol in sols {
            assert!((sol.power() - s.p_t).abs() <= 1e-9 * s.p_t);
        }
    }
}

#[test]
fn graph_rate_and_closed_form_match_primal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in samples(3, 2, 6, 10.0, 3, 10) {
        let aux = AuxTensors {
            a: (0..3).map(|_| C::random_cn(2, 2, &mut rng)).collect(),
            u: (0..3)
                .map(|_| {
                    let m = C::random_cn(2, 2, &mut rng);
                    m.matmul(&m.hermitian()).unwrap().add(&C::identity(2)).unwrap()
                })
                .collect(),
        };
        let primal = cfp(&s, &aux).unwrap();
        let mut g = Graph::<f64>::new();
        let hs = g.constant(s.stacked().to_tensor());
        let stack = |m: &[C]| tenn_core::Tensor::stack(&m.iter().map(C::to_tensor).collect::<Vec<_>>(), 0).unwrap();
        let a = g.constant(stack(&aux.a));
        let u = g.constant(stack(&aux.u));
        let v = cfp_graph(&mut g, hs, a, u, s.sigma2, s.p_t).unwrap();
        let w = precoder_from_columns(&C::from_tensor(g.value(v)).unwrap(), 3, 2);
        assert!(max_diff(&w, &primal.w) < 1e-12);
        let r = sum_rate_graph(&mut g, hs, v, s.sigma2, 3, 2).unwrap();
        assert!(rel(g.value(r).item(), primal.sum_rate) < 1e-12);
    }
}

#[test]
fn objective_invariant_under_paired_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in samples(4, 2, 6, 10.0, 3, 11) {
        let w = random_precoder(&s, &mut rng).unwrap();
        let base = sum_rate(&s, &w).unwrap().1;
        let ws = ChannelSample::new(w.clone(), s.sigma2, s.p_t).unwrap();
        for _ in 0..10 {
            let pk = Permutation::random(4, &mut rng);
            let pr = Permutation::random(2, &mut rng);
            let pt = Permutation::random(6, &mut rng);
            let r1 = sum_rate(&s.permute_users(&pk), &ws.permute_users(&pk).h).unwrap().1;
            let r2 = sum_rate(&s.permute_rx(&pr), &ws.permute_rx(&pr).h).unwrap().1;
            let r3 = sum_rate(&s.permute_tx(&pt), &ws.permute_tx(&pt).h).unwrap().1;
            for r in [r1, r2, r3] {
                assert!(rel(r, base) <= 1e-9);
            }
        }
    }
}

fn permute_square(m: &C, p: &Permutation) -> C {
    m.permute_rows(p).permute_cols(p)
}

#[test]
fn closed_form_commutes_with_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in samples(3, 2, 6, 10.0, 3, 12) {
        let aux = wmmse(&s, &WmmseOptions { max_iter: 3, ..Default::default() }).unwrap().aux;
        let base = cfp(&s, &aux).unwrap().w;
        for _ in 0..10 {
            // users: W follows the permutation
            let pk = Permutation::random(3, &mut rng);
            let idx = pk.zero_based();
            let aux_k = AuxTensors {
                a: idx.iter().map(|&i| aux.a[i].clone()).collect(),
                u: idx.iter().map(|&i| aux.u[i].clone()).collect(),
            };
            let w = cfp(&s.permute_users(&pk), &aux_k).unwrap().w;
            let expect: Vec<C> = idx.iter().map(|&i| base[i].clone()).collect();
            assert!(max_diff(&w, &expect) <= 1e-9);

            // receive antennas: A, U permuted on both axes
            let pr = Permutation::random(2, &mut rng);
            let aux_r = AuxTensors {
                a: aux.a.iter().map(|m| permute_square(m, &pr)).collect(),
                u: aux.u.iter().map(|m| permute_square(m, &pr)).collect(),
            };
            let w = cfp(&s.permute_rx(&pr), &aux_r).unwrap().w;
            let expect: Vec<C> = base.iter().map(|m| m.permute_rows(&pr)).collect();
            assert!(max_diff(&w, &expect) <= 1e-9);

            // transmit antennas: A, U fixed
            let pt = Permutation::random(6, &mut rng);
            let w = cfp(&s.permute_tx(&pt), &aux).unwrap().w;
            let expect: Vec<C> = base.iter().map(|m| m.permute_cols(&pt)).collect();
            assert!(max_diff(&w, &expect) <= 1e-9);
        }
    }
}

#[test]
fn schedule_value_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = SystemConfig::new(2, 2, 6).with_snr_db(10.0);
    cfg.k_tilde = 5;
    let mmse = |s: &ChannelSample<f64>| BaselinePrecoder::Mmse.apply(s);
    for s in gen_channels::<f64>(&cfg, 3, 13) {
        let eta = greedy_schedule(&s, 2, mmse).unwrap();
        let base = eval_schedule(&s, &eta, mmse).unwrap();
        for _ in 0..10 {
            let pk = Permutation::random(5, &mut rng);
            let eta_p: Vec<bool> = pk.zero_based().iter().map(|&i| eta[i]).collect();
            let r = eval_schedule(&s.permute_users(&pk), &eta_p, mmse).unwrap();
            assert!(rel(r, base) <= 1e-9);
            let pr = Permutation::random(2, &mut rng);
            let pt = Permutation::random(6, &mut rng);
            let r2 = eval_schedule(&s.permute_rx(&pr), &eta, mmse).unwrap();
            let r3 = eval_schedule(&s.permute_tx(&pt), &eta, mmse).unwrap();
            assert!(rel(r2, base) <= 1e-9 && rel(r3, base) <= 1e-9);
        }
        // labels follow user permutations and ignore antenna permutations
        let pk = Permutation::random(5, &mut rng);
        let eta_p: Vec<bool> = pk.zero_based().iter().map(|&i| eta[i]).collect();
        assert_eq!(greedy_schedule(&s.permute_users(&pk), 2, mmse).unwrap(), eta_p);
        let pr = Permutation::random(2, &mut rng);
        assert_eq!(greedy_schedule(&s.permute_rx(&pr), 2, mmse).unwrap(), eta);
    }
}

#[test]
fn closed_form_is_scale_invariant_in_u() {
    let s = &samples(2, 2, 4, 10.0, 1, 14)[0];
    let aux = AuxTensors::<f64>::identity(2, 2);
    let scaled = AuxTensors {
        a: aux.a.clone(),
        u: aux.u.iter().map(|m| m.scale(Complex::new(0.0, 3.0))).collect(),
    };
    let d = max_diff(&cfp(s, &aux).unwrap().w, &cfp(s, &scaled).unwrap().w);
    assert!(d < 1e-12);
}
