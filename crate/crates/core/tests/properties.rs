use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selafd::checkpoint::{Checkpoint, Dtype};
use selafd::dataset::split;
use selafd::eval::{MetricsReport, Prediction};
use selafd::model::Model;
use selafd::peft::{
    lora_forward, lora_merge, selafd_block_forward, AdapterVars, FineTuneMode, LoraLayer, LoraTarget, PeftBlockVars,
    PeftConfig,
};
use selafd::radar::{rasterize, stft_frames, Complex64, RasterConfig, RasterNorm, SpectrogramSample, StftParams};
use selafd::vit::{block_forward, BlockVars, LinearVars, NormVars, VitConfig};
use selafd::{Graph, Tensor};

fn micro(image_size: usize, patch_size: usize) -> VitConfig {
    VitConfig {
        image_size,
        patch_size,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        channels: 1,
        ln_eps: 1e-6,
    }
}

fn image(cfg: &VitConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[cfg.channels, cfg.image_size, cfg.image_size], 1.0, &mut rng)
}

/// Block weights for `d`, drawn from `rng`; the linear parts are scaled by
/// `linear_scale` (0 gives the residual-identity case).
struct BlockWeights {
    tensors: Vec<Tensor>,
}

impl BlockWeights {
    fn new(d: usize, hidden: usize, linear_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Vec::new();
        let mut push = |shape: &[usize], scale: f64, offset: f64, rng: &mut ChaCha8Rng| {
            let x = Tensor::randn(shape, 0.5, rng).scale(scale);
            t.push(x.add(&Tensor::full(shape, offset)).unwrap());
        };
        push(&[d], 0.2, 1.0, rng);
        push(&[d], 0.2, 0.0, rng);
        for _ in 0..4 {
            push(&[d, d], linear_scale, 0.0, rng);
            push(&[d], linear_scale, 0.0, rng);
        }
        push(&[d], 0.2, 1.0, rng);
        push(&[d], 0.2, 0.0, rng);
        push(&[hidden, d], linear_scale, 0.0, rng);
        push(&[hidden], linear_scale, 0.0, rng);
        push(&[d, hidden], linear_scale, 0.0, rng);
        push(&[d], linear_scale, 0.0, rng);
        BlockWeights { tensors: t }
    }

    fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BlockVars {
        let v: Vec<_> = self.tensors.iter().map(|t| g.constant(t)).collect();
        let lin = |i: usize| LinearVars { weight: v[i], bias: v[i + 1] };
        BlockVars {
            norm1: NormVars { gamma: v[0], beta: v[1] },
            q: lin(2),
            k: lin(4),
            v: lin(6),
            proj: lin(8),
            norm2: NormVars { gamma: v[10], beta: v[11] },
            fc1: lin(12),
            fc2: lin(14),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn token_count_follows_patch_grid(patch in 1usize..6, grid in 1usize..5, seed in any::<u64>()) {
        let cfg = micro(patch * grid, patch);
        prop_assert_eq!(cfg.seq_len(), grid * grid + 1);
        let model = Model::init(cfg, FineTuneMode::Linear, PeftConfig::default(), seed).unwrap();
        let maps = model.attention_maps(&image(&cfg, seed)).unwrap();
        for a in &maps {
            prop_assert_eq!(a.shape(), &[2, grid * grid + 1, grid * grid + 1]);
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), mode in 0usize..5) {
        let cfg = micro(16, 4);
        let mode = FineTuneMode::ALL[mode];
        let peft = PeftConfig { rank: 2, ..PeftConfig::default() };
        let model = Model::init(cfg, mode, peft, seed).unwrap();
        for a in model.attention_maps(&image(&cfg, seed ^ 1)).unwrap() {
            let t = a.shape()[2];
            for row in a.data().chunks(t) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12, "row sum {}", s);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn zeroed_block_is_identity(seed in any::<u64>(), tokens in 1usize..7) {
        let cfg = micro(16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = BlockWeights::new(8, 16, 0.0, &mut rng);
        let x = Tensor::randn(&[tokens, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let b = w.bind(&mut g);
        let xv = g.constant(&x);
        let (y, _) = block_forward(&mut g, xv, &b, &cfg).unwrap();
        prop_assert_eq!(g.value(y), x);
    }

    #[test]
    fn lora_matches_merged_weight(d in 2usize..=64, n in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 1 + (seed as usize % (d - 1)).min(7);
        let a = Tensor::randn(&[r, d], 1.0, &mut rng);
        let b = Tensor::randn(&[d, r], 1.0, &mut rng);
        let w0 = Tensor::randn(&[d, d], 1.0, &mut rng);
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let lora = LoraLayer::from_factors(a, b, LoraTarget::Query).unwrap();
        let merged = lora_merge(&w0, &lora).unwrap();
        let direct = x.matmul(&merged.transpose().unwrap()).unwrap();
        let y = lora_forward(&x, &w0, &lora).unwrap();
        prop_assert!(y.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn block_output_is_affine_in_scale(seed in any::<u64>()) {
        let cfg = micro(16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = BlockWeights::new(8, 16, 1.0, &mut rng);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let ad: Vec<Tensor> = [[8usize, 4].as_slice(), &[4], &[4, 8], &[8]]
            .iter()
            .map(|s| Tensor::randn(s, 0.5, &mut rng))
            .collect();
        let run = |s: f64| {
            let mut g = Graph::new();
            let b = w.bind(&mut g);
            let xv = g.constant(&x);
            let parallel = AdapterVars {
                w_down: g.constant(&ad[0]),
                b_down: g.constant(&ad[1]),
                w_up: g.constant(&ad[2]),
                b_up: g.constant(&ad[3]),
            };
            let peft = PeftBlockVars { parallel: Some(parallel), ..Default::default() };
            let (y, _) = selafd_block_forward(&mut g, xv, &b, &peft, &cfg, s).unwrap();
            g.value(y)
        };
        let (y0, yh, y1) = (run(0.0), run(0.5), run(1.0));
        prop_assert!(y1.max_abs_diff(&y0) > 1e-6);
        let mid = y0.add(&y1).unwrap().scale(0.5);
        prop_assert!(yh.max_abs_diff(&mid) < 1e-12);
    }

    #[test]
    fn frame_count_formula(len in 0usize..900, win in 4usize..120, hop in 1usize..12) {
        let p = StftParams { window_len: win, hop: hop.min(win), fft_len: win.next_power_of_two(), dynamic_range_db: 60.0 };
        let x = vec![Complex64::new(1.0, -0.5); len];
        match stft_frames(&x, &p) {
            Ok(frames) => {
                prop_assert!(len >= win);
                prop_assert_eq!(frames.len(), (len - win) / p.hop + 1);
                prop_assert_eq!(p.frame_count(len), frames.len());
            }
            Err(_) => prop_assert!(len < win),
        }
    }

    #[test]
    fn raster_is_always_finite(
        rows in 1usize..40,
        cols in 1usize..40,
        out in 1usize..48,
        values in prop::collection::vec(-1e300f64..1e300, 1600),
        identity in any::<bool>(),
    ) {
        let td = Tensor::new(&[rows, cols], values[..rows * cols].to_vec()).unwrap();
        let sp = SpectrogramSample {
            td,
            label: "walking".into(),
            params: StftParams::for_sample_rate(500.0),
            sample_rate: 500.0,
            source_id: "p".into(),
        };
        let norm = if identity { RasterNorm::Identity } else { RasterNorm::Standardize { mean: 0.5, std: 0.5 } };
        let img = rasterize(&sp, &RasterConfig { out_size: out, channels: 2, norm }).unwrap();
        prop_assert_eq!(img.shape(), &[2, out, out]);
        prop_assert!(img.all_finite());
    }

    #[test]
    fn split_partitions_and_stratifies(
        counts in prop::collection::vec(2usize..40, 1..7),
        ratio in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let s = split(&labels, ratio, seed).unwrap();
        let mut seen = vec![0u8; labels.len()];
        for &i in s.train.iter().chain(&s.test) {
            seen[i] += 1;
        }
        prop_assert!(seen.iter().all(|&k| k == 1));
        for (c, &n) in counts.iter().enumerate() {
            let train = s.train.iter().filter(|&&i| labels[i] == c).count() as f64;
            prop_assert!((train - n as f64 * ratio).abs() <= 1.0, "class {} train {} of {}", c, train, n);
        }
    }

    #[test]
    fn confusion_totals_match_predictions(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..200)) {
        let classes: Vec<String> = (0..6).map(|c| format!("c{c}")).collect();
        let preds: Vec<Prediction> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(t, p))| Prediction { truth: t, prediction: p, sample_id: i.to_string() })
            .collect();
        let r = MetricsReport::from_predictions("selafd", &classes, &preds, 1, 2).unwrap();
        let total: usize = r.confusion.iter().flatten().sum();
        prop_assert_eq!(total, pairs.len());
        for c in 0..6 {
            let row: usize = r.confusion[c].iter().sum();
            prop_assert_eq!(row, pairs.iter().filter(|p| p.0 == c).count());
        }
        let trace: usize = (0..6).map(|c| r.confusion[c][c]).sum();
        prop_assert!((r.accuracy - trace as f64 / total as f64).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits(seed in any::<u64>(), mode in 0usize..5) {
        let cfg = micro(16, 8);
        let peft = PeftConfig { rank: 2, ..PeftConfig::default() };
        let mut model = Model::init(cfg, FineTuneMode::ALL[mode], peft, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in model.params.iter_mut() {
            let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
            *t = t.add(&noise).unwrap().with_requires_grad(t.requires_grad());
        }
        let bytes = model.to_checkpoint().to_bytes(Dtype::F64).unwrap();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap()).unwrap();
        let x = image(&cfg, seed);
        prop_assert_eq!(model.logits(&x).unwrap(), back.logits(&x).unwrap());
        prop_assert_eq!(back.to_checkpoint().to_bytes(Dtype::F64).unwrap(), bytes);
    }
}
