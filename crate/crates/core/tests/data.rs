use accent_asr::embeddings::{ExtractorConfig, ZNorm};
use accent_asr::experiment::{data_split, ExperimentConfig, ExtractedEmbeddings};
use accent_asr::nn::{Graph, ParamStore, Tensor};
use accent_asr::synth::{split, Corpus, CorpusConfig, Split, SplitMode, Utterance};
use nalgebra::{DMatrix, DVector};

/// Class-weighted least-squares linear classifier (±1 targets, bias column);
/// returns the balanced accuracy on `test`.
fn linear_probe(train: &[(&[f64], bool)], test: &[(&[f64], bool)]) -> f64 {
    let d = train[0].0.len() + 1;
    let row = |x: &[f64]| {
        let mut r = x.to_vec();
        r.push(1.0);
        r
    };
    let ones = train.iter().filter(|(_, c)| *c).count() as f64;
    let scale = |c: bool| if c { ones.recip() } else { (train.len() as f64 - ones).recip() }.sqrt();
    let x = DMatrix::from_row_iterator(
        train.len(),
        d,
        train.iter().flat_map(|(f, c)| row(f).into_iter().map(move |v| v * scale(*c))),
    );
    let y = DVector::from_iterator(train.len(), train.iter().map(|(_, c)| if *c { scale(true) } else { -scale(false) }));
    let gram = x.transpose() * &x + DMatrix::identity(d, d) * 1e-6;
    let w = gram.cholesky().unwrap().solve(&(x.transpose() * y));
    let recall = |class: bool| {
        let of: Vec<_> = test.iter().filter(|(_, c)| *c == class).collect();
        let hits = of.iter().filter(|(f, _)| (DVector::from_vec(row(f)).dot(&w) > 0.0) == class).count();
        hits as f64 / of.len() as f64
    };
    (recall(false) + recall(true)) / 2.0
}

fn frames_of<'a>(c: &'a Corpus, accent: usize, split: Split, label: bool) -> Vec<(&'a [f64], bool)> {
    c.utterances
        .iter()
        .filter(|u| u.accent == accent && u.split == split)
        .flat_map(|u| (0..u.frames.rows()).map(move |r| (u.frames.row_slice(r), label)))
        .collect()
}

fn probe(cfg: &CorpusConfig, a: usize, b: usize) -> f64 {
    let corpus = Corpus::generate(cfg).unwrap();
    let mut train = frames_of(&corpus, a, Split::Train, false);
    train.extend(frames_of(&corpus, b, Split::Train, true));
    let mut test = frames_of(&corpus, a, Split::Test, false);
    test.extend(frames_of(&corpus, b, Split::Test, true));
    linear_probe(&train, &test)
}

// Accents in one region share most of their distortion, so the probe pairs
// cross regions.
#[test]
fn linear_probe_separates_accents_on_held_out_frames() {
    let cfg = CorpusConfig::default();
    for (a, b) in [(0, 2), (2, 4), (1, 5)] {
        let acc = probe(&cfg, a, b);
        eprintln!("probe {a} vs {b}: {acc:.4}");
        assert!(acc >= 0.95, "accents {a} vs {b}: {acc}");
    }
    let flat = CorpusConfig {
        transform_strength: 0.0,
        ..cfg
    };
    let acc = probe(&flat, 0, 2);
    assert!(acc < 0.6, "no transform but probe accuracy {acc}");
}

#[test]
fn splits_partition_accents() {
    let cfg = CorpusConfig::default();
    let corpus = Corpus::generate(&cfg).unwrap();
    let all = split(&corpus, SplitMode::All).unwrap();
    let inv = |u: &[Utterance]| u.iter().map(|u| u.accent).collect::<std::collections::BTreeSet<_>>();
    assert_eq!(inv(&all.train), inv(&all.test));
    assert!(all.novel.is_empty());
    let s18 = split(&corpus, SplitMode::S18).unwrap();
    assert!(s18.train.iter().all(|u| !cfg.held_out.contains(&u.accent)));
    assert!(s18.test.iter().any(|u| u.accent == cfg.dominant));
    assert_eq!(s18.novel, cfg.held_out.iter().copied().collect());
    assert!(s18.test.iter().any(|u| s18.novel.contains(&u.accent)));
    let bad = CorpusConfig {
        held_out: vec![9],
        ..CorpusConfig::default()
    };
    assert!(Corpus::generate(&bad).is_err());
}

fn extracted() -> (ExperimentConfig, ExtractedEmbeddings, accent_asr::synth::DataSplit) {
    let cfg = ExperimentConfig::default();
    let utts = Corpus::generate(&cfg.corpus).unwrap().utterances;
    let data = data_split(&cfg, &utts).unwrap();
    let emb = ExtractedEmbeddings::build(&cfg, &data).unwrap();
    (cfg, emb, data)
}

#[test]
fn extractor_separates_accents_and_normalises_on_train() {
    let (cfg, emb, data) = extracted();
    let acc = emb.validation_accuracy.unwrap();
    assert!(acc >= 0.95, "validation accent accuracy {acc}");
    assert_eq!(cfg.extractor, ExtractorConfig::default());

    let train: Vec<&[f64]> = data.train.iter().map(|u| emb.by_id[&u.id].as_slice()).collect();
    let n = train.len() as f64;
    for j in 0..emb.table.dim() {
        let mean = train.iter().map(|v| v[j]).sum::<f64>() / n;
        let var = train.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "dim {j} mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-9, "dim {j} std {}", var.sqrt());
    }
    assert!(emb.table.is_normalized());
    assert_eq!(emb.by_id.len(), data.train.len() + data.test.len());

    let (_, again, _) = extracted();
    assert_eq!(emb.by_id, again.by_id);
    assert_eq!(emb.table.matrix(), again.table.matrix());
}

#[test]
fn table_rows_are_training_means_of_normalised_embeddings() {
    let (_, emb, data) = extracted();
    for &a in &data.seen {
        let rows: Vec<&Vec<f64>> = data.train.iter().filter(|u| u.accent == a).map(|u| &emb.by_id[&u.id]).collect();
        let row = emb.table.lookup(a).unwrap();
        for (j, r) in row.iter().enumerate() {
            let m = rows.iter().map(|v| v[j]).sum::<f64>() / rows.len() as f64;
            assert!((m - r).abs() < 1e-12);
        }
    }
}

#[test]
fn znorm_fits_population_statistics() {
    let rows: [&[f64]; 2] = [&[1.0, 5.0], &[3.0, 5.0]];
    let z = ZNorm::fit(&rows).unwrap();
    let mut v = [1.0, 5.0];
    z.apply(&mut v).unwrap();
    assert_eq!(v, [-1.0, 0.0]);
}

#[test]
fn row_lookup_sends_gradient_to_one_row() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let mut g = Graph::new(&store);
    let w = g.param("w").unwrap();
    let r = g.gather_row(w, 1).unwrap();
    assert_eq!(g.value(r).data(), &[3.0, 4.0]);
    let sq = g.mul(r, r).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(&store, "w").unwrap().data(), &[0.0, 0.0, 6.0, 8.0, 0.0, 0.0]);
}
