use levit_core::blocks::{AttentionKind, Params};
use levit_core::model::{
    ablation, count_model, count_spec, preset, toy, Block, Model, ModelSpec, EMBED_BLOCK, HEAD_BLOCK, PRESET_NAMES,
};
use levit_core::tensor::ops;
use levit_core::{LevitError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn images(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// Closed-form MAC and parameter tally written directly from the family
/// table, independent of the library's spec types.
struct Row {
    key_dim: usize,
    mlp: usize,
    value_ratio: usize,
    shrink_ratio: usize,
    /// (depth, C, N)
    stages: Vec<(usize, usize, usize)>,
    classes: usize,
}

fn oracle(row: &Row) -> (u64, u64) {
    let (d, k) = (row.key_dim, row.classes);
    let c0 = row.stages[0].1;
    let widths = [3, c0 / 8, c0 / 4, c0 / 2, c0];
    let mut macs = 0;
    let mut params = 0;
    let mut r = 224;
    for w in widths.windows(2) {
        r /= 2;
        macs += w[0] * w[1] * 9 * r * r;
        params += w[0] * w[1] * 9 + 2 * w[1];
    }
    // conv + BN pairs contribute weight + 2*out params
    let pw = |cin: usize, cout: usize| cin * cout + 2 * cout;
    let mut g: usize = 14;
    for (s, &(depth, c, n)) in row.stages.iter().enumerate() {
        if s > 0 {
            let cin = row.stages[s - 1].1;
            let sn = 4 * cin / (d * row.shrink_ratio);
            let svd = row.shrink_ratio * d;
            let gq = g.div_ceil(2);
            let (hw, hwq) = (g * g, gq * gq);
            macs += cin * sn * d * hwq
                + cin * sn * d * hw
                + cin * sn * svd * hw
                + sn * hwq * hw * (d + svd)
                + sn * svd * c * hwq;
            params += 2 * pw(cin, sn * d) + pw(cin, sn * svd) + pw(sn * svd, c) + sn * hw;
            g = gq;
            macs += 2 * c * row.mlp * c * g * g;
            params += pw(c, row.mlp * c) + pw(row.mlp * c, c);
        }
        let vd = row.value_ratio * d;
        let hw = g * g;
        for _ in 0..depth {
            macs += 2 * c * n * d * hw + c * n * vd * hw + n * hw * hw * (d + vd) + n * vd * c * hw;
            params += 2 * pw(c, n * d) + pw(c, n * vd) + pw(n * vd, c) + n * hw;
            macs += 2 * c * row.mlp * c * hw;
            params += pw(c, row.mlp * c) + pw(row.mlp * c, c);
        }
    }
    let last = row.stages.last().unwrap().1;
    macs += 2 * last * k;
    params += 2 * (2 * last + last * k + k);
    (macs as u64, params as u64)
}

fn family_row(name: &str) -> Row {
    let (key_dim, stages) = match name {
        "LeViT-128S" => (16, vec![(2, 128, 4), (3, 256, 6), (4, 384, 8)]),
        "LeViT-128" => (16, vec![(4, 128, 4), (4, 256, 8), (4, 384, 12)]),
        "LeViT-192" => (32, vec![(4, 192, 3), (4, 288, 5), (4, 384, 6)]),
        "LeViT-256" => (32, vec![(4, 256, 4), (4, 384, 6), (4, 512, 8)]),
        "LeViT-384" => (32, vec![(4, 384, 6), (4, 512, 9), (4, 768, 12)]),
        "A1-straight" => (19, vec![(11, 114, 3)]),
        "A6-classic-blocks" => (30, vec![(2, 120, 4), (3, 180, 6), (4, 240, 8)]),
        _ => unreachable!(),
    };
    let (mlp, value_ratio, shrink_ratio) = if name.starts_with("A6") { (4, 1, 1) } else { (2, 2, 4) };
    Row { key_dim, mlp, value_ratio, shrink_ratio, stages, classes: 1000 }
}

#[test]
fn counts_match_independent_tally() {
    for name in PRESET_NAMES {
        let report = count_spec(&preset(name).unwrap()).unwrap();
        let (macs, params) = oracle(&family_row(name));
        assert_eq!(report.total_macs(), macs, "{name} macs");
        assert_eq!(report.total_params(), params, "{name} params");
    }
}

#[test]
fn counts_match_recorded_integers() {
    // tallies produced once by a separate script over the family table
    let expected: [(&str, u64, u64); 5] = [
        ("LeViT-128S", 304_660_832, 7_777_058),
        ("LeViT-128", 405_321_728, 9_213_936),
        ("LeViT-192", 657_022_080, 10_947_069),
        ("LeViT-256", 1_127_257_344, 18_893_876),
        ("LeViT-384", 2_351_786_880, 39_128_836),
    ];
    for (name, macs, params) in expected {
        let r = count_spec(&preset(name).unwrap()).unwrap();
        assert_eq!((r.total_macs(), r.total_params()), (macs, params), "{name}");
    }
    let r = count_spec(&preset("LeViT-256").unwrap()).unwrap();
    // 3*32*9*112^2 + 3 * (32*64*9*56^2) since each later conv has the same cost
    assert_eq!(r.block(EMBED_BLOCK).unwrap().macs, 3 * 32 * 9 * 112 * 112 + 3 * 32 * 64 * 9 * 56 * 56);
    assert_eq!(r.block(EMBED_BLOCK).unwrap().macs, 184_246_272);
}

#[test]
fn built_models_count_like_their_specs() {
    for name in ["LeViT-128S", "LeViT-192", "A1-straight", "A6-classic-blocks"] {
        let spec = preset(name).unwrap();
        let model: Model<f32> = Model::build(&spec, 0).unwrap();
        let walked = count_model(&model);
        let formula = count_spec(&spec).unwrap();
        assert_eq!(walked.blocks, formula.blocks, "{name}");
        assert_eq!(walked.total_params() as usize, model.param_count(), "{name}");
    }
    for id in ["A2", "A3", "A4", "A5", "A7"] {
        let spec = ablation(id).unwrap();
        let model: Model<f32> = Model::build(&spec, 0).unwrap();
        assert_eq!(count_model(&model).blocks, count_spec(&spec).unwrap().blocks, "{id}");
    }
}

#[test]
fn family_is_strictly_ordered_in_cost() {
    let macs: Vec<u64> =
        PRESET_NAMES[..5].iter().map(|n| count_spec(&preset(n).unwrap()).unwrap().total_macs()).collect();
    assert!(macs.windows(2).all(|w| w[0] < w[1]), "{macs:?}");
}

#[test]
fn cost_grows_with_depth_width_and_resolution() {
    let base = preset("LeViT-128S").unwrap();
    let cost = |s: &ModelSpec| count_spec(s).unwrap().total_macs();
    let mut deeper = base.clone();
    deeper.stages[1].depth += 1;
    assert!(cost(&deeper) > cost(&base));
    let bigger = base.with_resolution(256).unwrap();
    assert!(cost(&bigger) > cost(&base));
}

#[test]
fn ablation_presets_have_the_requested_structure() {
    let a1 = preset("A1-straight").unwrap();
    assert_eq!(a1.stages.len(), 1);
    let s = &a1.stages[0];
    assert_eq!((s.depth, s.key_dim, s.heads, s.channels), (11, 19, 3, 114));
    let a6 = preset("A6-classic-blocks").unwrap();
    assert_eq!(a6.stages.iter().map(|s| s.channels).collect::<Vec<_>>(), vec![120, 180, 240]);
    assert!(a6.stages.iter().all(|s| s.key_dim == 30));
    assert_eq!(a6.mlp_ratio, 4);
    assert_eq!(a6.subsamples.iter().map(|s| s.heads).collect::<Vec<_>>(), vec![16, 24]);
}

#[test]
fn levit_256_stage_shapes_at_224() {
    let model: Model<f32> = Model::build(&preset("LeViT-256").unwrap(), 0).unwrap();
    let stages = model.infer_stages(&images(&[1, 3, 224, 224], 1)).unwrap();
    let shapes: Vec<&[usize]> = stages.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, vec![&[1, 256, 14, 14][..], &[1, 256, 14, 14], &[1, 384, 7, 7], &[1, 512, 4, 4]]);
}

#[test]
fn construction_is_deterministic_per_seed() {
    let spec = toy(4);
    let a: Model<f32> = Model::build(&spec, 5).unwrap();
    let b: Model<f32> = Model::build(&spec, 5).unwrap();
    let c: Model<f32> = Model::build(&spec, 6).unwrap();
    let flat = |m: &Model<f32>| m.named_tensors().into_iter().flat_map(|(_, t, _)| t.into_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn fresh_residual_blocks_are_exact_identities() {
    for spec in [toy(4), preset("LeViT-128S").unwrap().with_resolution(64).unwrap()] {
        let model: Model<f32> = Model::build(&spec, 2).unwrap();
        let stages = model.infer_stages(&images(&[2, 3, spec.img_size, spec.img_size], 3)).unwrap();
        let mut x = stages[0].clone();
        for block in model.blocks() {
            let y = block.infer(&x).unwrap();
            if block.is_residual() {
                assert_eq!(y, x, "{}", block.name());
            }
            x = y;
        }
    }
}

#[test]
fn fresh_model_output_is_head_of_pooled_shrink_path() {
    let spec = toy(4);
    let model: Model<f32> = Model::build(&spec, 4).unwrap();
    let x = images(&[3, 3, 32, 32], 5);
    let mut h = model.patch_embed.infer(&x).unwrap();
    for block in model.blocks() {
        if let Block::Attention(a) = block {
            if a.kind == AttentionKind::Shrinking {
                h = a.infer(&h).unwrap();
            }
        }
    }
    let want = model.head.infer(&ops::avgpool_global(&h).unwrap()).unwrap();
    assert_eq!(model.predict(&x).unwrap(), want);
}

#[test]
fn single_stage_output_at_init_is_head_of_pooled_embedding() {
    let spec = preset("A1-straight").unwrap().with_resolution(64).unwrap();
    let model: Model<f32> = Model::build(&spec, 4).unwrap();
    let x = images(&[2, 3, 64, 64], 6);
    let pooled = ops::avgpool_global(&model.patch_embed.infer(&x).unwrap()).unwrap();
    assert_eq!(model.predict(&x).unwrap(), model.head.infer(&pooled).unwrap());
}

#[test]
fn specs_round_trip_through_toml() {
    let mut specs: Vec<ModelSpec> = PRESET_NAMES.iter().map(|n| preset(n).unwrap()).collect();
    specs.extend(["A2", "A3", "A4", "A5", "A7"].map(|id| ablation(id).unwrap()));
    specs.push(toy(4));
    for spec in specs {
        let text = spec.to_toml();
        assert_eq!(ModelSpec::from_toml(&text).unwrap(), spec, "{}", spec.name);
    }
}

#[test]
fn spec_errors_name_the_field() {
    let mut spec = preset("LeViT-128S").unwrap();
    spec.subsamples[1].heads += 1;
    match spec.validate() {
        Err(LevitError::Config { field, .. }) => assert_eq!(field, "subsamples[1].heads"),
        other => panic!("{other:?}"),
    }
    let mut spec = preset("LeViT-128S").unwrap();
    spec.stages[2].grid = [5, 5];
    assert!(matches!(spec.validate(), Err(LevitError::Config { field, .. }) if field == "stages[2].grid"));
    assert!(matches!(preset("LeViT-999"), Err(LevitError::UnknownPreset { .. })));
    assert!(ModelSpec::from_toml("name = 3").is_err());
}

#[test]
fn cost_csv_round_trips_and_has_one_row_per_block() {
    let spec = preset("A1-straight").unwrap();
    let report = count_spec(&spec).unwrap();
    // embed + 11 attention + 11 MLP + head
    assert_eq!(report.blocks.len(), 11 * 2 + 2);
    assert_eq!(report.blocks.last().unwrap().name, HEAD_BLOCK);
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let back = levit_core::CostReport::read_csv(&report.model, buf.as_slice()).unwrap();
    assert_eq!(back.blocks, report.blocks);
    assert_eq!(back.total_macs(), report.total_macs());
}

#[test]
fn parameter_conventions_differ_by_one_head() {
    let r = count_spec(&preset("LeViT-256").unwrap()).unwrap();
    assert_eq!(r.total_params() - r.single_head_params(), 2 * 512 + 512 * 1000 + 1000);
    assert_eq!(r.single_head_params(), 18_379_852);
    let model: Model<f32> = Model::build(&preset("LeViT-128S").unwrap(), 0).unwrap();
    assert_eq!(model.param_count(), Params::param_count(&model));
}
