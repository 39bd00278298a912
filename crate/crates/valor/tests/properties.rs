//! Property tests over the spec's stated invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use valor::data::{acd, ConceptOntology, GeneratorConfig};
use valor::mga::{fine_similarity, CommonEmbeddings, ModalityGroup, Weighting};
use valor::tensor::{Graph, ParamStore, Tensor};
use valor::text::{detokenize, normalize, tokenize};

fn unit_rows(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|mut r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            r.iter_mut().for_each(|x| *x /= n);
            r
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// detokenize(tokenize(s)) == normalize(s) for corpus-style sentences.
    #[test]
    fn tokenizer_round_trip(words in proptest::collection::vec(0usize..16, 1..12)) {
        let gen = GeneratorConfig::default();
        let vocab = gen.vocabulary().unwrap();
        // Build sentences from in-vocabulary words (ids after the specials).
        let sentence: Vec<&str> = words
            .iter()
            .map(|&w| vocab.token(5 + (w % (vocab.len() - 5))).unwrap())
            .collect();
        let text = sentence.join(" ");
        let (ids, mask) = tokenize(&text, &vocab, 32).unwrap();
        prop_assert_eq!(detokenize(&ids, &vocab), normalize(&text));
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), sentence.len().min(30) + 2);
    }

    /// Softmax outputs are a probability vector for any finite input.
    #[test]
    fn softmax_is_a_distribution(values in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![values.len()], values).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let sum: f64 = g.data(y).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(g.data(y).iter().all(|&v| v >= 0.0));
    }

    /// Fine similarity is invariant under permutations of the target rows.
    #[test]
    fn fine_similarity_target_permutation(
        seed in 0u64..1000,
        perm_seed in 0u64..1000,
        n_t in 1usize..6,
        n_v in 2usize..6,
    ) {
        use rand::Rng;
        use rand::seq::SliceRandom;
        let c = 6;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut cfg = valor::encoders::EncoderConfig::tiny();
        cfg.text_dim = c;
        cfg.vision_dim = c;
        cfg.audio_dim = c;
        let mut store = ParamStore::new();
        let align = valor::mga::init_alignment(&mut store, &mut rng, &cfg, c).unwrap();

        let t_rows = unit_rows((0..n_t).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect());
        let v_rows = unit_rows((0..n_v).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect());
        let mut shuffled = v_rows.clone();
        let mut perm_rng = ChaCha20Rng::seed_from_u64(perm_seed);
        shuffled.shuffle(&mut perm_rng);

        let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<f64>>();
        let group = ModalityGroup::parse("T-V").unwrap();
        let mut g = Graph::new();
        let e1 = CommonEmbeddings {
            text: g.constant(vec![n_t, c], flat(&t_rows)),
            text_mask: vec![true; n_t],
            vision: Some(g.constant(vec![n_v, c], flat(&v_rows))),
            audio: None,
        };
        let e2 = CommonEmbeddings {
            text: g.constant(vec![n_t, c], flat(&t_rows)),
            text_mask: vec![true; n_t],
            vision: Some(g.constant(vec![n_v, c], flat(&shuffled))),
            audio: None,
        };
        let s1 = fine_similarity(&mut g, &store, &align, &e1, &e1, &group, Weighting::Learned).unwrap();
        let s2 = fine_similarity(&mut g, &store, &align, &e2, &e2, &group, Weighting::Learned).unwrap();
        prop_assert!((g.value(s1) - g.value(s2)).abs() < 1e-12);
    }

    /// ACD ignores caption order and duplicated whitespace.
    #[test]
    fn acd_order_and_whitespace_invariance(
        pick in proptest::collection::vec(0usize..6, 1..10),
        swap in 0usize..10,
    ) {
        let pool = [
            "a dog barks",
            "rain on the roof",
            "a police siren wails",
            "quiet night",
            "dog and dog",
            "birds sing",
        ];
        let ontology = ConceptOntology::new(["dog", "rain", "police siren"]).unwrap();
        let corpus: Vec<String> = pick.iter().map(|&i| pool[i].to_string()).collect();
        let mut reordered = corpus.clone();
        reordered.rotate_left(swap % reordered.len().max(1));
        let padded: Vec<String> = reordered
            .iter()
            .map(|c| c.replace(' ', "   "))
            .collect();
        let a = acd(&corpus, &ontology).unwrap();
        let b = acd(&padded, &ontology).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
    }

    /// Stacking encoder outputs matches the per-frame independence contract:
    /// encoding frames jointly equals encoding them one at a time.
    #[test]
    fn per_frame_encoding_independence(seed in 0u64..500) {
        use rand::Rng;
        let cfg = valor::encoders::EncoderConfig::tiny();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = valor::encoders::init_vision_encoder(&mut store, &mut rng, &cfg).unwrap();
        let n = cfg.frame_h * cfg.frame_w;
        let f0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let mut joint_data = f0.clone();
        joint_data.extend_from_slice(&f1);
        let joint = Tensor::new(vec![2, cfg.frame_h, cfg.frame_w, 1], joint_data).unwrap();
        let enc_joint = valor::encoders::encode_vision(&mut g, &store, &p, &cfg, &joint).unwrap();

        for (i, frame) in [f0, f1].into_iter().enumerate() {
            let single = Tensor::new(vec![1, cfg.frame_h, cfg.frame_w, 1], frame).unwrap();
            let enc_single = valor::encoders::encode_vision(&mut g, &store, &p, &cfg, &single).unwrap();
            prop_assert_eq!(g.data(enc_joint.frames[i]), g.data(enc_single.frames[0]));
        }
    }
}
