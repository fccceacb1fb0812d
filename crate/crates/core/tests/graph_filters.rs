use graph_hawkes::filters::{chebyshev_bank, gat_bank, l3net_bank, GatSupport};
use graph_hawkes::graph::{khop_index, scaled_laplacian};
use graph_hawkes::{Graph, SquareMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Connected graphs: a random spanning tree plus extra random edges.
fn connected_graph() -> impl Strategy<Value = Graph> {
    (3usize..12)
        .prop_flat_map(|n| {
            let parents: Vec<_> = (1..n).map(|v| 0..v).collect();
            (Just(n), parents, prop::collection::vec((0..n, 0..n), 0..2 * n))
        })
        .prop_map(|(n, parents, extra)| {
            let mut edges: Vec<(usize, usize)> = parents.into_iter().enumerate().map(|(i, p)| (i + 1, p)).collect();
            edges.extend(extra.into_iter().filter(|(a, b)| a != b));
            Graph::new(n, &edges).unwrap()
        })
}

fn permute(m: &SquareMatrix, perm: &[usize]) -> SquareMatrix {
    let n = m.dim();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            out.set(perm[i], perm[j], m.get(i, j));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn edge_list_round_trips(g in connected_graph()) {
        let back = Graph::parse_edge_list(&g.to_edge_list()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn hop_shells_match_bfs(g in connected_graph()) {
        let dist = g.hop_distances();
        let idx = khop_index(&g, 3);
        for order in 0..=3 {
            for v in 0..g.num_nodes() {
                let mut expect: Vec<usize> = (0..g.num_nodes()).filter(|&u| dist[v][u] == order).collect();
                let mut got = idx.shell(order, v).to_vec();
                expect.sort_unstable();
                got.sort_unstable();
                prop_assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn scaled_laplacian_spectrum_in_unit_interval(g in connected_graph()) {
        let spec = scaled_laplacian(&g).unwrap();
        let n = g.num_nodes();
        prop_assert!(spec.scaled_laplacian.max_abs_diff(&spec.scaled_laplacian.transpose()) < 1e-12);
        // Normalized Laplacian eigenvalues lie in [0, 2].
        prop_assert!(spec.lambda_max > 0.0 && spec.lambda_max <= 2.0 + 1e-9);
        let mut shifted = spec.scaled_laplacian.clone();
        for i in 0..n {
            shifted.add_at(i, i, 1.0);
        }
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        for _ in 0..200 {
            let y: Vec<f64> = (0..n).map(|i| (0..n).map(|j| shifted.get(i, j) * x[j]).sum()).collect();
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            x = y.into_iter().map(|v| v / norm).collect();
        }
        let rayleigh: f64 = (0..n)
            .map(|i| x[i] * (0..n).map(|j| shifted.get(i, j) * x[j]).sum::<f64>())
            .sum();
        prop_assert!(rayleigh <= 2.0 + 1e-6, "top eigenvalue of L~ + I is {}", rayleigh);
    }

    #[test]
    fn chebyshev_bank_is_permutation_equivariant(g in connected_graph(), seed in any::<u64>()) {
        let n = g.num_nodes();
        let perm = {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            p
        };
        let a = chebyshev_bank(&scaled_laplacian(&g).unwrap(), 4).unwrap().materialize();
        let b = chebyshev_bank(&scaled_laplacian(&g.permuted(&perm).unwrap()).unwrap(), 4)
            .unwrap()
            .materialize();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(permute(x, &perm).max_abs_diff(y) < 1e-9);
        }
    }

    #[test]
    fn l3net_masks_follow_relabelling(g in connected_graph(), perm_seed in any::<u64>()) {
        let n = g.num_nodes();
        let perm = {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            p
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orders = [0, 1, 2];
        let a = l3net_bank(&khop_index(&g, 2), &orders, &mut rng).unwrap();
        let b = l3net_bank(&khop_index(&g.permuted(&perm).unwrap(), 2), &orders, &mut rng).unwrap();
        for r in 0..orders.len() {
            for s in 0..n {
                for t in 0..n {
                    prop_assert_eq!(a.is_masked_in(r, s, t), b.is_masked_in(r, perm[s], perm[t]));
                }
            }
        }
    }

    #[test]
    fn gat_rows_are_distributions(g in connected_graph(), params in prop::collection::vec(-3.0f64..3.0, 64)) {
        for support in [GatSupport::OneHop, GatSupport::Full] {
            let mut bank = gat_bank(&khop_index(&g, 2), 2, support).unwrap();
            let k = bank.num_params();
            bank.set_free_params(&params.iter().cycle().take(k).copied().collect::<Vec<_>>()).unwrap();
            for (r, m) in bank.materialize().iter().enumerate() {
                for (i, s) in m.row_sums().iter().enumerate() {
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    for j in 0..g.num_nodes() {
                        prop_assert!(m.get(i, j) >= 0.0);
                        if !bank.is_masked_in(r, i, j) {
                            prop_assert_eq!(m.get(i, j), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn l3net_filters_are_linear_in_params(
        g in connected_graph(),
        x in prop::collection::vec(-1.0f64..1.0, 200),
        y in prop::collection::vec(-1.0f64..1.0, 200),
        c in -2.0f64..2.0,
    ) {
        let mut bank = l3net_bank(&khop_index(&g, 2), &[0, 1, 2], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let k = bank.num_params();
        prop_assume!(k <= x.len());
        let mut at = |p: Vec<f64>| {
            bank.set_free_params(&p).unwrap();
            bank.materialize()
        };
        let mx = at(x[..k].to_vec());
        let my = at(y[..k].to_vec());
        let mix = at((0..k).map(|i| x[i] + c * y[i]).collect());
        for r in 0..3 {
            let mut expect = mx[r].clone();
            expect.axpy(c, &my[r]);
            prop_assert!(expect.max_abs_diff(&mix[r]) < 1e-12);
        }
    }
}
