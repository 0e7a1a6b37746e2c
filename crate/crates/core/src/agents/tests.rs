use rand::Rng;

use super::*;
use crate::autodiff::check_gradients;
use crate::genome::random_genotype;
use crate::rng::stream;

fn tiny_config() -> AgentConfig {
    AgentConfig {
        feature_size: 8,
        hidden_size: 8,
        embed_size: 8,
        vocab_size: 2,
        max_len: 2,
        feed_previous_token: true,
    }
}

fn random_rows(rows: usize, cols: usize, rng: &mut RandomStream) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn zeroed(mut agent: Agent) -> Agent {
    agent
        .params
        .values_mut()
        .iter_mut()
        .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    agent
}

fn generate(agent: &Agent, feats: &Tensor, mode: DecodeMode, seed: u64) -> Generation {
    let mut tape = Tape::new();
    let vars = agent.register(&mut tape, false);
    let f = tape.constant(feats.clone());
    agent
        .generate(&mut tape, &vars, f, mode, 1.2, &mut stream(seed))
        .unwrap()
}

#[test]
fn zero_sender_is_uniform_with_max_entropy() {
    let cfg = AgentConfig::default();
    let sender = zeroed(init_agent(Role::Sender, Arch::Lstm, &cfg, 0, &mut stream(1)).unwrap());
    let feats = random_rows(6, cfg.feature_size, &mut stream(2));
    for mode in [DecodeMode::Greedy, DecodeMode::Sample, DecodeMode::Train] {
        let out = generate(&sender, &feats, mode, 3);
        for d in &out.distributions {
            assert!(d.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        }
        assert!((out.entropy - 5f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn messages_respect_length_and_padding() {
    let cfg = AgentConfig::default();
    let mut rng = stream(4);
    for arch in [Arch::Lstm, Arch::Genotype(random_genotype(3, &mut rng))] {
        let sender = init_agent(Role::Sender, arch, &cfg, 0, &mut rng).unwrap();
        let feats = random_rows(64, cfg.feature_size, &mut rng);
        for mode in [DecodeMode::Train, DecodeMode::Sample, DecodeMode::Greedy] {
            let out = generate(&sender, &feats, mode, 5);
            for m in &out.messages.tokens {
                assert_eq!(m.tokens().len(), cfg.max_len);
                if let Some(p) = m.tokens().iter().position(|&t| t == cfg.vocab_size) {
                    assert!(m.tokens()[p..].iter().all(|&t| t == cfg.vocab_size));
                }
            }
            assert!(out.entropy >= 0.0 && out.entropy <= 5f64.ln() + 1e-12);
        }
    }
}

#[test]
fn train_tokens_are_argmax_of_emitted_one_hots() {
    let cfg = AgentConfig::default();
    let sender = init_agent(Role::Sender, Arch::Lstm, &cfg, 0, &mut stream(6)).unwrap();
    let feats = random_rows(32, cfg.feature_size, &mut stream(7));
    let mut tape = Tape::new();
    let vars = sender.register(&mut tape, true);
    let f = tape.constant(feats);
    let out = sender
        .generate(&mut tape, &vars, f, DecodeMode::Train, 1.2, &mut stream(8))
        .unwrap();
    let sym = cfg.symbols();
    for (t, &step) in out.messages.steps.iter().enumerate() {
        for (r, row) in tape.value(step).data().chunks(sym).enumerate() {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(crate::autodiff::argmax(row), out.messages.tokens[r].tokens()[t]);
        }
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let cfg = AgentConfig::default();
    let sender = init_agent(Role::Sender, Arch::Lstm, &cfg, 0, &mut stream(9)).unwrap();
    let feats = random_rows(16, cfg.feature_size, &mut stream(10));
    for mode in [DecodeMode::Train, DecodeMode::Sample] {
        let a = generate(&sender, &feats, mode, 11);
        let b = generate(&sender, &feats, mode, 11);
        assert_eq!(a.messages.tokens, b.messages.tokens);
        assert_eq!(a.entropy.to_bits(), b.entropy.to_bits());
    }
}

fn score(receiver: &Agent, messages: Vec<Message>, cands: &Tensor, group: usize) -> Tensor {
    let mut tape = Tape::new();
    let vars = receiver.register(&mut tape, false);
    let batch = MessageBatch::from_messages(&mut tape, messages);
    let c = tape.constant(cands.clone());
    let s = receiver.score(&mut tape, &vars, &batch, c, group).unwrap();
    tape.value(s).clone()
}

#[test]
fn zero_receiver_scores_all_equal() {
    let cfg = AgentConfig::default();
    let receiver = zeroed(init_agent(Role::Receiver, Arch::Lstm, &cfg, 0, &mut stream(1)).unwrap());
    let msgs = vec![Message::padded(&[1, 2], 4, 5), Message::padded(&[3], 4, 5)];
    let cands = random_rows(8, cfg.feature_size, &mut stream(2));
    let s = score(&receiver, msgs, &cands, 4);
    for row in s.data().chunks(4) {
        assert!(row.iter().all(|&v| v == row[0]));
    }
}

#[test]
fn scores_are_linear_in_candidates() {
    let cfg = AgentConfig::default();
    let mut rng = stream(3);
    let receiver = init_agent(Role::Receiver, Arch::Genotype(random_genotype(4, &mut rng)), &cfg, 0, &mut rng).unwrap();
    let msgs = vec![Message::padded(&[1, 0, 2], 4, 5), Message::padded(&[], 4, 5)];
    let cands = random_rows(8, cfg.feature_size, &mut rng);
    let s1 = score(&receiver, msgs.clone(), &cands, 4);
    let s2 = score(&receiver, msgs, &cands.scaled(2.0), 4);
    for (a, b) in s1.data().iter().zip(s2.data()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn receiver_ignores_padding() {
    let cfg = AgentConfig::default();
    let receiver = init_agent(Role::Receiver, Arch::Lstm, &cfg, 0, &mut stream(5)).unwrap();
    let cands = random_rows(4, cfg.feature_size, &mut stream(6));
    // Tokens after the bound token are normalized away and never read.
    let a = score(&receiver, vec![Message::new(vec![1, 4, 2, 3, 0], 4)], &cands, 4);
    let b = score(&receiver, vec![Message::new(vec![1, 4, 4, 4, 4], 4)], &cands, 4);
    assert_eq!(a, b);
}

#[test]
fn receiver_loss_passes_gradient_check() {
    let cfg = tiny_config();
    let mut rng = stream(12);
    for arch in [Arch::Lstm, Arch::Genotype(random_genotype(3, &mut rng))] {
        let receiver = init_agent(Role::Receiver, arch, &cfg, 0, &mut rng).unwrap();
        let msgs = vec![
            Message::padded(&[0, 1], 2, 2),
            Message::padded(&[1], 2, 2),
            Message::padded(&[], 2, 2),
        ];
        let cands = random_rows(3 * 4, cfg.feature_size, &mut rng);
        let err = check_gradients(
            |tape, vars| {
                let av = AgentVars {
                    vars: vars.to_vec(),
                    trainable: true,
                };
                let batch = MessageBatch::from_messages(tape, msgs.clone());
                let c = tape.constant(cands.clone());
                let s = receiver.score(tape, &av, &batch, c, 4)?;
                tape.cross_entropy(s, &[0, 3, 1])
            },
            receiver.params.values(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn composed_pipeline_passes_gradient_check() {
    let cfg = tiny_config();
    let mut rng = stream(13);
    let sender = init_agent(Role::Sender, Arch::Lstm, &cfg, 0, &mut rng).unwrap();
    let receiver = init_agent(Role::Receiver, Arch::Genotype(random_genotype(2, &mut rng)), &cfg, 1, &mut rng).unwrap();
    let feats = random_rows(3, cfg.feature_size, &mut rng);
    let cands = random_rows(3 * 4, cfg.feature_size, &mut rng);
    let ns = sender.params.len();
    let mut inputs = sender.params.values().to_vec();
    inputs.extend(receiver.params.values().iter().cloned());
    let err = check_gradients(
        |tape, vars| {
            let sv = AgentVars {
                vars: vars[..ns].to_vec(),
                trainable: true,
            };
            let rv = AgentVars {
                vars: vars[ns..].to_vec(),
                trainable: true,
            };
            let f = tape.constant(feats.clone());
            let gen = sender.generate(tape, &sv, f, DecodeMode::Relaxed, 1.2, &mut stream(99))?;
            let c = tape.constant(cands.clone());
            let s = receiver.score(tape, &rv, &gen.messages, c, 4)?;
            tape.cross_entropy(s, &[2, 0, 1])
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn init_is_deterministic_and_records_arch() {
    let cfg = AgentConfig::default();
    let a = init_agent(Role::Sender, Arch::Lstm, &cfg, 3, &mut stream(1)).unwrap();
    let b = init_agent(Role::Sender, Arch::Lstm, &cfg, 3, &mut stream(1)).unwrap();
    assert_eq!(a.params, b.params);
    assert!(a.genotype().is_none());
    assert_eq!(a.meta.age, 0);
    assert!(a.meta.loss_history.is_empty());

    let g = random_genotype(5, &mut stream(2));
    let r = init_agent(Role::Receiver, Arch::Genotype(g.clone()), &cfg, 4, &mut stream(3)).unwrap();
    assert_eq!(r.genotype(), Some(&g));
    let cell = compile_cell(&cell_spec(&cfg, &r.arch)).unwrap();
    let in_agent: Vec<_> = r
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("cell."))
        .map(|(n, t)| (n.trim_start_matches("cell.").to_string(), t.shape().to_vec()))
        .collect();
    let expected: Vec<_> = cell.into_iter().map(|s| (s.name, s.shape)).collect();
    assert_eq!(in_agent, expected);
}

#[test]
fn invalid_genotype_is_rejected_at_init() {
    let bad = Genotype::new(vec![crate::genome::GenotypeNode {
        activation: crate::genome::Activation::Tanh,
        connection: 4,
    }]);
    assert!(matches!(
        init_agent(Role::Sender, Arch::Genotype(bad), &AgentConfig::default(), 0, &mut stream(0)),
        Err(Error::Validation(_))
    ));
}

#[test]
fn record_batch_tracks_age() {
    let mut meta = AgentMeta::new(0);
    for l in [1.0, 0.5, 0.25] {
        record_batch(&mut meta, l).unwrap();
    }
    assert_eq!(meta.age, 3);
    assert_eq!(meta.loss_history.len(), 3);
    assert!(matches!(record_batch(&mut meta, f64::NAN), Err(Error::Numeric(_))));
    assert_eq!(meta.age, 3);

    let mut rng = stream(1);
    let mut meta = AgentMeta::new(1);
    for _ in 0..10_000 {
        let l = if rng.random_bool(0.05) { f64::NAN } else { rng.random() };
        let _ = record_batch(&mut meta, l);
        assert_eq!(meta.loss_history.len(), meta.age);
    }
}

#[test]
fn wrong_role_is_a_contract_error() {
    let cfg = AgentConfig::default();
    let receiver = init_agent(Role::Receiver, Arch::Lstm, &cfg, 0, &mut stream(1)).unwrap();
    let mut tape = Tape::new();
    let vars = receiver.register(&mut tape, false);
    let f = tape.constant(Tensor::zeros(&[1, cfg.feature_size]));
    assert!(matches!(
        receiver.generate(&mut tape, &vars, f, DecodeMode::Greedy, 1.2, &mut stream(0)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AgentConfig::default();
    let mut rng = stream(2);
    for (i, arch) in [Arch::Lstm, Arch::Genotype(random_genotype(3, &mut rng))]
        .into_iter()
        .enumerate()
    {
        let mut agent = init_agent(Role::Receiver, arch, &cfg, 7 + i as u64, &mut rng).unwrap();
        record_batch(&mut agent.meta, 1.25).unwrap();
        record_batch(&mut agent.meta, 0.1 + 0.2).unwrap();
        let path = dir.path().join(format!("a{i}.ckpt"));
        write_checkpoint(&agent, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.params, agent.params);
        assert_eq!(back.meta, agent.meta);
        assert_eq!(back.arch, agent.arch);

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }
    assert!(matches!(
        read_checkpoint(&dir.path().join("missing.ckpt")),
        Err(Error::MissingPath(_))
    ));
}

#[test]
fn checkpoint_version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let agent = init_agent(Role::Sender, Arch::Lstm, &AgentConfig::default(), 0, &mut stream(1)).unwrap();
    let path = dir.path().join("s.ckpt");
    write_checkpoint(&agent, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let split = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header = std::str::from_utf8(&bytes[..split])
        .unwrap()
        .replacen("\"format_version\":1", "\"format_version\":9", 1);
    let mut patched = header.into_bytes();
    patched.extend_from_slice(&bytes[split..]);
    std::fs::write(&path, patched).unwrap();
    let err = read_checkpoint(&path).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}
