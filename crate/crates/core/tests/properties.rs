use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use flowmo::config::{compute_bpp, fingerprint_of, ConfigBundle};
use flowmo::flow::interpolate;
use flowmo::model::renormalize_rows;
use flowmo::nn::to_f64_vec;
use flowmo::quantizer::{pack_tokens, unpack_tokens, TokenIds};
use flowmo::sampler::{schedule_from_weights, shifted_schedule};

fn code_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<bool>)> {
    (1usize..4, 1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(b, s, groups, g)| {
        let d = groups * g;
        proptest::collection::vec(any::<bool>(), b * s * d).prop_map(move |bits| (b, s, d, g, bits))
    })
}

proptest! {
    #[test]
    fn pack_unpack_roundtrip((b, s, d, g, bits) in code_strategy()) {
        let values: Vec<f64> = bits.iter().map(|&x| if x { 1.0 } else { -1.0 }).collect();
        let code = Tensor::from_vec(values.clone(), (b, s, d), &Device::Cpu).unwrap();
        let tokens = pack_tokens(&code, g).unwrap();
        prop_assert_eq!(tokens.ids.len(), b * s * d / g);
        prop_assert!(tokens.ids.iter().all(|&id| (id as usize) < 1 << g));
        let back = unpack_tokens(&tokens, DType::F64, &Device::Cpu).unwrap();
        prop_assert_eq!(to_f64_vec(&back).unwrap(), values);

        let mut buf = Vec::new();
        tokens.write_to(&mut buf).unwrap();
        prop_assert_eq!(TokenIds::read_from(buf.as_slice()).unwrap(), tokens);
    }

    #[test]
    fn shifted_schedule_is_valid(n in 1usize..60, rho in 1.0f64..8.0) {
        let s = shifted_schedule(n, rho).unwrap();
        let t = s.times();
        prop_assert_eq!(t.len(), n + 1);
        prop_assert_eq!(t[0], 1.0);
        prop_assert_eq!(t[n], 0.0);
        prop_assert!(t.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn weighted_schedule_is_valid(u in proptest::collection::vec(1e-3f64..1.0, 1..20)) {
        let s = schedule_from_weights(&u).unwrap();
        let t = s.times();
        prop_assert_eq!(t[0], 1.0);
        prop_assert_eq!(*t.last().unwrap(), 0.0);
        prop_assert!(t.windows(2).all(|w| w[1] < w[0]));
        let total: f64 = u.iter().sum();
        for i in 0..u.len() {
            prop_assert!((t[i] - t[i + 1] - u[i] / total).abs() < 1e-12);
        }
    }

    #[test]
    fn bpp_monotone(s in 1u64..2048, bits in 1u32..20, res in 1u64..512) {
        let base = compute_bpp(s, 1 << bits, res).unwrap();
        prop_assert!(compute_bpp(s + 1, 1 << bits, res).unwrap() > base);
        prop_assert!(compute_bpp(s, 1 << (bits + 1), res).unwrap() > base);
    }

    #[test]
    fn interpolation_is_affine_in_t(x in -3.0f64..3.0, z in -3.0f64..3.0, t in 0.0f64..=1.0) {
        let dev = Device::Cpu;
        let xt = interpolate(&Tensor::new(&[x], &dev).unwrap(), &Tensor::new(&[z], &dev).unwrap(), &Tensor::new(&[t], &dev).unwrap()).unwrap();
        let got = to_f64_vec(&xt).unwrap()[0];
        prop_assert!((got - (t * z + (1.0 - t) * x)).abs() < 1e-12);
    }

    #[test]
    fn renormalized_rows_have_unit_norm(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000) {
        let w = flowmo::nn::randn(&mut flowmo::nn::seeded(seed), &[rows, cols], DType::F64, &Device::Cpu).unwrap();
        let r = to_f64_vec(&renormalize_rows(&w).unwrap()).unwrap();
        for row in r.chunks(cols) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_text_roundtrip(steps in 1usize..100, rho in 1.0f64..6.0, lr in 1e-5f64..1e-1) {
        let mut b = ConfigBundle::default();
        b.set("sampler.num_steps", &steps.to_string()).unwrap();
        b.set("sampler.rho", &rho.to_string()).unwrap();
        b.set("train.learning_rate", &lr.to_string()).unwrap();
        let back = ConfigBundle::parse(&b.to_text()).unwrap();
        prop_assert_eq!(&back, &b);
        prop_assert_eq!(fingerprint_of(&back.entries()), fingerprint_of(&b.entries()));
    }
}
