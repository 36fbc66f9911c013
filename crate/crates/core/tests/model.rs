use csgan::corpus::{BOS, EOS};
use csgan::model::{sidecar_path, Batch, Graph, Model, StageBinding, StyleId, TransformerConfig};
use csgan::CsError;

fn toy(binding: StageBinding, seed: u64) -> Model<f64> {
    let cfg = TransformerConfig {
        vocab_size: 20,
        n_layers: 2,
        hidden: 8,
        n_heads: 2,
        ff_dim: 16,
        max_len: 8,
        n_styles: 2,
        dropout: 0.0,
    };
    Model::new(cfg, binding, seed).unwrap()
}

fn batch() -> Batch {
    Batch::from_ids(&[vec![BOS, 5, 9, 11, EOS], vec![BOS, 13, 4, EOS]]).unwrap()
}

#[test]
fn full_size_latent_shape() {
    let m = Model::<f32>::new(TransformerConfig::new(30), StageBinding::stage1(), 1).unwrap();
    let b = Batch::from_ids(&[vec![BOS, 5, 6, 7, EOS], vec![BOS, 8, 9, 10, EOS]]).unwrap();
    let mut g = m.frozen_graph().unwrap();
    let z = g.encode(&b, StyleId::Matrix).unwrap();
    assert_eq!(g.tape.shape(z.values), &[2, 5, 256]);
    let logits = g.discriminate(&z).unwrap();
    assert_eq!(g.tape.shape(logits), &[2, 2]);
}

#[test]
fn unbound_styles_are_rejected() {
    let m = toy(StageBinding::stage1(), 1);
    let mut g = m.frozen_graph().unwrap();
    assert!(matches!(
        g.encode(&batch(), StyleId::Natural),
        Err(CsError::UnboundStyle(_))
    ));
    let m2 = toy(StageBinding::stage2(), 1);
    assert!(m2
        .transfer(&[], StyleId::Artificial, 8, 4)
        .unwrap()
        .is_empty());
    assert!(StageBinding::new(1, StyleId::Matrix, StyleId::Matrix).is_err());
}

#[test]
fn soft_decoding_at_low_temperature_follows_greedy_choices() {
    let m = toy(StageBinding::stage1(), 4);
    let b = batch();
    let mut g = m.frozen_graph().unwrap();
    let z = g.encode(&b, StyleId::Matrix).unwrap();
    let greedy = g.decode_greedy(&z, StyleId::Embedded, 8).unwrap();
    let seq = g.decode_soft(&z, StyleId::Embedded, 7, 1e-4).unwrap();
    let dists = g.value(seq.dists).clone();
    for (bi, ids) in greedy.iter().enumerate() {
        for t in 0..ids.len() - 1 {
            let row: Vec<f64> = (0..20).map(|v| dists[[bi, t, v]]).collect();
            let argmax = (0..20).max_by(|&a, &c| row[a].total_cmp(&row[c])).unwrap();
            assert_eq!(argmax, ids[t + 1], "example {bi} step {t}");
        }
    }
    assert!(g.decode_soft(&z, StyleId::Embedded, 7, 0.0).is_err());
    assert!(g.decode_soft(&z, StyleId::Embedded, 9, 1.0).is_err());
}

/// Weighted sum of the pooled re-encoded latent, with gradients for
/// `style_emb` when asked.
fn pooled_reencoding(m: &Model<f64>, grads: bool) -> (f64, Option<ndarray::ArrayD<f64>>) {
    let mut g = Graph::new(m, |n| grads && n == "style_emb").unwrap();
    let z = g.encode(&batch(), StyleId::Matrix).unwrap();
    let seq = g.decode_soft(&z, StyleId::Embedded, 4, 1.0).unwrap();
    let z2 = g.reencode_soft(&seq, StyleId::Embedded).unwrap();
    let p = g.tape.mean_pool(z2.values, &z2.mask).unwrap();
    let w = g
        .tape
        .constant(ndarray::ArrayD::from_shape_fn(vec![2, 8], |i| {
            0.1 + i[1] as f64 * 0.3 - i[0] as f64 * 0.2
        }))
        .unwrap();
    let p = g.tape.mul(p, w).unwrap();
    let s = g.tape.sum(p).unwrap();
    let value = g.tape.scalar(s);
    (
        value,
        grads.then(|| g.gradients(s).unwrap().remove("style_emb").unwrap()),
    )
}

#[test]
fn style_embedding_reaches_the_reencoded_latent() {
    let m = toy(StageBinding::stage1(), 2);
    let analytic = pooled_reencoding(&m, true).1.unwrap();
    assert!(analytic.iter().any(|&x| x.abs() > 1e-8));
    for j in [1usize, 8 + 3] {
        let h = 1e-5;
        let (mut plus, mut minus) = (m.clone(), m.clone());
        plus.params
            .get_mut("style_emb")
            .unwrap()
            .as_slice_mut()
            .unwrap()[j] += h;
        minus
            .params
            .get_mut("style_emb")
            .unwrap()
            .as_slice_mut()
            .unwrap()[j] -= h;
        let numeric =
            (pooled_reencoding(&plus, false).0 - pooled_reencoding(&minus, false).0) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[j];
        assert!(
            (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
            "{a} vs {numeric}"
        );
    }
}

#[test]
fn checkpoint_roundtrip_keeps_config_and_binding() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    let m = toy(StageBinding::stage2(), 3).convert::<f32>();
    m.save(&path).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = Model::<f32>::load(&path).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.binding, StageBinding::stage2());
    assert_eq!(back.config, m.config);
    let names: Vec<&str> = back.params.names().collect();
    let mut dedup = names.clone();
    dedup.dedup();
    assert_eq!(names, dedup);
    assert_eq!(
        names
            .iter()
            .filter(|n| n.starts_with("enc.0.self.q"))
            .count(),
        2
    );

    std::fs::write(sidecar_path(&path), "{}").unwrap();
    assert!(Model::<f32>::load(&path).is_err());
}

#[test]
fn greedy_transfer_is_well_formed() {
    let m = toy(StageBinding::stage1(), 8).convert::<f32>();
    let recs: Vec<_> = (0..5)
        .map(|i| csgan::corpus::SentenceRecord {
            ids: vec![BOS, 4 + i, 10 + i, EOS],
            tags: vec![],
            origin: csgan::corpus::Origin::MatrixCorpus,
        })
        .collect();
    let out = m.transfer(&recs, StyleId::Embedded, 8, 2).unwrap();
    assert_eq!(out.len(), 5);
    for ids in &out {
        assert_eq!(ids[0], BOS);
        assert!(ids.iter().all(|&i| i < 20));
        assert!(ids.last() == Some(&EOS) || ids.len() == 8);
    }
    assert_eq!(out, m.transfer(&recs, StyleId::Embedded, 8, 3).unwrap());
}
