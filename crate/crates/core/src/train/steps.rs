use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{params_of, Dataset, Phase, StepMetrics, TrainError, TrainState};
use crate::model::{Discriminator, Dropout, Generator, ModelError};
use crate::remi::{TokenKind, Vocabulary};
use crate::tensor::{bce_logits, Tensor};
use crate::views::ViewKind;

/// Losses and accuracies of one update of both discriminators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscStats {
    pub melody_loss: f64,
    pub rhythm_loss: f64,
    pub melody_acc: f64,
    pub rhythm_acc: f64,
}

/// Relaxation temperature after `k` adversarial steps.
pub fn gumbel_tau(start: f64, end: f64, decay: f64, k: u64) -> f64 {
    (start * decay.powf(k as f64)).max(end)
}

/// Mean over the batch of each example's mean next-token NLL.
fn nll_loss(gen: &Generator, rng: &mut ChaCha8Rng, data: &Dataset, batch: &[usize]) -> Result<Tensor, TrainError> {
    let rate = gen.config.dropout;
    let mut total: Option<Tensor> = None;
    for &i in batch {
        let ex = &data.examples[i];
        let l = gen.nll_ids(&ex.cond, &ex.target, &mut Dropout::train(rate, rng))?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    let total = total.ok_or(TrainError::EmptyDataset)?;
    Ok(total.scale(1.0 / batch.len() as f64))
}

fn check_data(data: &Dataset) -> Result<(), TrainError> {
    if data.is_empty() {
        Err(TrainError::EmptyDataset)
    } else {
        Ok(())
    }
}

fn record(state: &mut TrainState, m: StepMetrics) {
    state.step += 1;
    state.log.push(m);
}

fn push_nll(state: &mut TrainState, nll: f64) {
    state.recent_nll.push_back(nll);
    while state.recent_nll.len() > state.config.nll_window {
        state.recent_nll.pop_front();
    }
}

/// One teacher-forced update of the generator.
pub fn nll_step(state: &mut TrainState, data: &Dataset) -> Result<StepMetrics, TrainError> {
    check_data(data)?;
    let batch = state.next_batch(data.len());
    let loss = nll_loss(&state.generator, &mut state.rngs.dropout, data, &batch)?;
    loss.backward();
    state.gen_opt.step(&params_of(&state.generator.params()))?;
    let nll = loss.item();
    push_nll(state, nll);
    state.nll_steps += 1;
    let mut m = StepMetrics::new(state.step, Phase::Nll);
    m.nll = Some(nll);
    m.total = Some(nll);
    record(state, m.clone());
    Ok(m)
}

/// Total length allowed for a sampled piece.
fn sample_budget(gen: &Generator, data: &Dataset) -> usize {
    let longest = data.max_target_len();
    (longest + longest / 4 + 8).min(gen.config.max_len)
}

/// Free-running Gumbel-max sampling (an exact draw from the model at
/// temperature 1). Returns the sampled ids and the noise row of each draw.
fn sample_with_noise(
    gen: &Generator,
    rng: &mut ChaCha8Rng,
    cond: &[usize],
    prefix: &[usize],
    budget: usize,
) -> Result<(Vec<usize>, Vec<Vec<f64>>), ModelError> {
    let mut noise = Vec::new();
    let max_new = budget.saturating_sub(prefix.len()).max(1);
    let ids = gen.sample_ids(cond, prefix, max_new, |logits| {
        let g: Vec<f64> = (0..logits.len())
            .map(|_| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                -(-u.ln()).ln()
            })
            .collect();
        let pick = (0..logits.len()).fold(0, |b, j| if logits[j] + g[j] > logits[b] + g[b] { j } else { b });
        noise.push(g);
        pick
    })?;
    Ok((ids, noise))
}

fn in_range(vocab: &Vocabulary, kind: TokenKind, id: usize) -> bool {
    vocab.range(kind).contains(&(id as u32))
}

/// Ids of `ids` with the view's hidden kind replaced by `Mask`.
pub(crate) fn view_ids(vocab: &Vocabulary, kind: ViewKind, ids: &[usize]) -> Vec<usize> {
    let masked = kind.masked_kind();
    let mask = vocab.mask_id() as usize;
    ids.iter().map(|&i| if in_range(vocab, masked, i) { mask } else { i }).collect()
}

/// Nonzero shifts up to `max_shift` that keep every pitch id in range.
fn admissible_shifts(vocab: &Vocabulary, ids: &[usize], max_shift: i32) -> Vec<i32> {
    let r = vocab.range(TokenKind::NoteOnPitch);
    let (lo, hi) = ids
        .iter()
        .filter(|&&i| r.contains(&(i as u32)))
        .fold((i32::MAX, i32::MIN), |(lo, hi), &i| (lo.min(i as i32), hi.max(i as i32)));
    (-max_shift..=max_shift)
        .filter(|&k| k != 0 && (lo == i32::MAX || (lo + k >= r.start as i32 && hi + k < r.end as i32)))
        .collect()
}

fn draw_shift(vocab: &Vocabulary, ids: &[usize], max_shift: i32, rng: &mut ChaCha8Rng) -> i32 {
    admissible_shifts(vocab, ids, max_shift).choose(rng).copied().unwrap_or(0)
}

pub(crate) fn shift_ids(vocab: &Vocabulary, ids: &[usize], k: i32) -> Vec<usize> {
    ids.iter().map(|&i| if in_range(vocab, TokenKind::NoteOnPitch, i) { (i as i32 + k) as usize } else { i }).collect()
}

/// Column permutation that moves pitch column `p` to `p + k`, wrapping inside
/// the pitch block. On admissible shifts it agrees with [`shift_ids`].
pub(crate) fn shift_permutation(vocab: &Vocabulary, k: i32) -> Vec<usize> {
    let r = vocab.range(TokenKind::NoteOnPitch);
    let (lo, n) = (r.start as i32, (r.end - r.start) as i32);
    (0..vocab.len())
        .map(|j| if r.contains(&(j as u32)) { (lo + (j as i32 - lo - k).rem_euclid(n)) as usize } else { j })
        .collect()
}

fn onehot(ids: &[usize], v: usize) -> Tensor {
    let mut d = vec![0.0; ids.len() * v];
    for (r, &i) in ids.iter().enumerate() {
        d[r * v + i] = 1.0;
    }
    Tensor::from_vec(&[ids.len(), v], d).expect("shape")
}

/// Differentiable view of a piece whose tail rows come from the generator:
/// `prefix` rows are constant one-hots and `rows` carries the gradient.
fn soft_view(vocab: &Vocabulary, kind: ViewKind, prefix: &[usize], sampled: &[usize], rows: &Tensor) -> Result<Tensor, TrainError> {
    let v = vocab.len();
    let masked = kind.masked_kind();
    let mask = vocab.mask_id() as usize;
    let mut keep = vec![1.0; sampled.len() * v];
    let mut fill = vec![0.0; sampled.len() * v];
    for (r, &i) in sampled.iter().enumerate() {
        if in_range(vocab, masked, i) {
            keep[r * v..(r + 1) * v].fill(0.0);
            fill[r * v + mask] = 1.0;
        }
    }
    let keep = Tensor::from_vec(&[sampled.len(), v], keep)?;
    let fill = Tensor::from_vec(&[sampled.len(), v], fill)?;
    let tail = rows.mul(&keep)?.add(&fill)?;
    let head = onehot(&view_ids(vocab, kind, prefix), v);
    Ok(Tensor::concat(&[head, tail], 0)?)
}

fn adversarial_term(logit: &Tensor, non_saturating: bool) -> Tensor {
    if non_saturating {
        // -log σ(D)
        bce_logits(logit, 1.0)
    } else {
        // log(1 - σ(D))
        bce_logits(logit, 0.0).scale(-1.0)
    }
}

/// The generator objective on one batch, before any update.
pub struct GeneratorLoss {
    pub total: Tensor,
    pub nll: f64,
    pub adv_melody: f64,
    pub adv_rhythm: f64,
    /// Sampled pieces (prefix plus samples), detached, for the discriminators.
    pub fakes: Vec<Vec<usize>>,
}

/// `NLL + α·adv_m + β·adv_r`, with the sampled pieces relaxed by
/// straight-through Gumbel-softmax so the adversarial terms reach the
/// generator. Both discriminators run in evaluation mode.
pub fn generator_loss(state: &mut TrainState, data: &Dataset, batch: &[usize]) -> Result<GeneratorLoss, TrainError> {
    let nll = nll_loss(&state.generator, &mut state.rngs.dropout, data, batch)?;
    let cfg = &state.config;
    let tau = gumbel_tau(cfg.gumbel_tau_start, cfg.gumbel_tau_end, cfg.gumbel_tau_decay, state.adv_steps);
    let gen = &state.generator;
    let vocab = gen.vocab().clone();
    let v = vocab.len();
    let bar = vocab.bar_id() as usize;
    let budget = sample_budget(gen, data);
    let mut adv_m: Option<Tensor> = None;
    let mut adv_r: Option<Tensor> = None;
    let mut fakes = Vec::with_capacity(batch.len());
    for &i in batch {
        let ex = &data.examples[i];
        let (sampled, noise) = sample_with_noise(gen, &mut state.rngs.sample, &ex.cond, &ex.prefix, budget)?;
        let p = ex.prefix.len();
        if sampled.is_empty() {
            return Err(ModelError::SequenceTooLong { len: p, max_len: gen.config.max_len }.into());
        }
        let mut fed = ex.prefix.clone();
        fed.extend_from_slice(&sampled[..sampled.len() - 1]);
        let logits = gen.forward_ids(&ex.cond, &fed, &mut Dropout::eval())?.slice(0, p - 1, p - 1 + sampled.len())?;
        let noise = Tensor::from_vec(&[sampled.len(), v], noise.concat())?;
        let perturbed = logits.add(&noise)?;
        debug_assert!(sampled.iter().enumerate().all(|(r, &id)| {
            let row = &perturbed.data()[r * v..(r + 1) * v];
            row.iter().all(|&x| x <= row[id] + 1e-9)
        }));
        let soft = perturbed.scale(1.0 / tau).softmax(1)?;
        let rows = Tensor::straight_through(&onehot(&sampled, v), &soft)?;
        let mut full = ex.prefix.clone();
        full.extend_from_slice(&sampled);
        let is_bar: Vec<bool> = full.iter().map(|&t| t == bar).collect();

        let shift = draw_shift(&vocab, &full, cfg.max_shift, &mut state.rngs.augment);
        let melody = soft_view(&vocab, ViewKind::Melody, &ex.prefix, &sampled, &rows)?.gather_cols(&shift_permutation(&vocab, shift))?;
        let rhythm = soft_view(&vocab, ViewKind::Rhythm, &ex.prefix, &sampled, &rows)?;
        let dm = state.melody.forward_onehot(&melody, &is_bar, &mut Dropout::eval())?;
        let dr = state.rhythm.forward_onehot(&rhythm, &is_bar, &mut Dropout::eval())?;
        let (tm, tr) = (adversarial_term(&dm, cfg.non_saturating), adversarial_term(&dr, cfg.non_saturating));
        adv_m = Some(match adv_m {
            Some(a) => a.add(&tm)?,
            None => tm,
        });
        adv_r = Some(match adv_r {
            Some(a) => a.add(&tr)?,
            None => tr,
        });
        fakes.push(full);
    }
    let inv = 1.0 / batch.len() as f64;
    let adv_m = adv_m.ok_or(TrainError::EmptyDataset)?.scale(inv);
    let adv_r = adv_r.ok_or(TrainError::EmptyDataset)?.scale(inv);
    let total = nll.add(&adv_m.scale(cfg.alpha))?.add(&adv_r.scale(cfg.beta))?;
    Ok(GeneratorLoss { nll: nll.item(), adv_melody: adv_m.item(), adv_rhythm: adv_r.item(), total, fakes })
}

fn clear_grads(d: &Discriminator) {
    for (_, p) in d.params() {
        p.zero_grad();
    }
}

/// Loss and accuracy of one discriminator over real and fake id sequences,
/// then one optimizer step on it.
fn update_discriminator(
    disc: &Discriminator,
    opt: &mut crate::tensor::Adam,
    real: &[Vec<usize>],
    fake: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
    max_shift: i32,
) -> Result<(f64, f64), TrainError> {
    let vocab = disc.vocab();
    let rate = disc.config.dropout;
    let mut correct = 0usize;
    let mut parts = Vec::new();
    for (label, set) in [(1.0, real), (0.0, fake)] {
        let mut sum: Option<Tensor> = None;
        for ids in set {
            let mut ids = view_ids(vocab, disc.kind, ids);
            if disc.kind == ViewKind::Melody {
                let k = draw_shift(vocab, &ids, max_shift, rng);
                ids = shift_ids(vocab, &ids, k);
            }
            let logit = disc.forward_ids(&ids, &mut Dropout::train(rate, rng))?;
            if (logit.item() > 0.0) == (label == 1.0) {
                correct += 1;
            }
            let l = bce_logits(&logit, label);
            sum = Some(match sum {
                Some(s) => s.add(&l)?,
                None => l,
            });
        }
        if let Some(s) = sum {
            parts.push(s.scale(1.0 / set.len() as f64));
        }
    }
    let loss = match parts.as_slice() {
        [a, b] => a.add(b)?,
        [a] => a.clone(),
        _ => return Err(TrainError::EmptyDataset),
    };
    loss.backward();
    opt.step(&params_of(&disc.params()))?;
    Ok((loss.item(), correct as f64 / (real.len() + fake.len()) as f64))
}

/// One update of each discriminator: label 1 on the views of `real`, label 0
/// on the views of `fake`. Melody views of both sides are pitch-shifted by a
/// random admissible offset so transposition is no cue.
pub fn disc_step(state: &mut TrainState, real: &[Vec<usize>], fake: &[Vec<usize>]) -> Result<DiscStats, TrainError> {
    let shift = state.config.max_shift;
    let (melody_loss, melody_acc) =
        update_discriminator(&state.melody, &mut state.melody_opt, real, fake, &mut state.rngs.disc, shift)?;
    let (rhythm_loss, rhythm_acc) =
        update_discriminator(&state.rhythm, &mut state.rhythm_opt, real, fake, &mut state.rngs.disc, shift)?;
    state.disc_steps += 1;
    Ok(DiscStats { melody_loss, rhythm_loss, melody_acc, rhythm_acc })
}

fn disc_metrics(m: &mut StepMetrics, s: &DiscStats) {
    m.d_m_loss = Some(s.melody_loss);
    m.d_r_loss = Some(s.rhythm_loss);
    m.d_m_acc = Some(s.melody_acc);
    m.d_r_acc = Some(s.rhythm_acc);
}

/// One discriminator update against fresh generator samples.
fn disc_pretrain_step(state: &mut TrainState, data: &Dataset) -> Result<StepMetrics, TrainError> {
    let batch = state.next_batch(data.len());
    let budget = sample_budget(&state.generator, data);
    let mut real = Vec::with_capacity(batch.len());
    let mut fake = Vec::with_capacity(batch.len());
    for &i in &batch {
        let ex = &data.examples[i];
        let (sampled, _) = sample_with_noise(&state.generator, &mut state.rngs.sample, &ex.cond, &ex.prefix, budget)?;
        let mut full = ex.prefix.clone();
        full.extend(sampled);
        fake.push(full);
        real.push(ex.target.clone());
    }
    let stats = disc_step(state, &real, &fake)?;
    let mut m = StepMetrics::new(state.step, Phase::Disc);
    disc_metrics(&mut m, &stats);
    record(state, m.clone());
    Ok(m)
}

/// Generator update on the adversarial objective followed by
/// `disc_steps` updates of both discriminators on the detached samples.
pub fn adversarial_step(state: &mut TrainState, data: &Dataset) -> Result<StepMetrics, TrainError> {
    check_data(data)?;
    let batch = state.next_batch(data.len());
    let loss = generator_loss(state, data, &batch)?;
    loss.total.backward();
    state.gen_opt.step(&params_of(&state.generator.params()))?;
    // the adversarial terms also left gradients on the discriminators
    clear_grads(&state.melody);
    clear_grads(&state.rhythm);
    push_nll(state, loss.nll);
    state.adv_steps += 1;

    let real: Vec<Vec<usize>> = batch.iter().map(|&i| data.examples[i].target.clone()).collect();
    let mut m = StepMetrics::new(state.step, Phase::Adv);
    for _ in 0..state.config.disc_steps {
        let stats = disc_step(state, &real, &loss.fakes)?;
        disc_metrics(&mut m, &stats);
    }
    m.nll = Some(loss.nll);
    m.adv_melody = Some(loss.adv_melody);
    m.adv_rhythm = Some(loss.adv_rhythm);
    m.total = Some(loss.total.item());
    record(state, m.clone());
    Ok(m)
}

fn under_limit(done: u64, max_steps: Option<u64>) -> bool {
    max_steps.is_none_or(|m| done < m)
}

/// Teacher-forced pretraining until the running-mean NLL drops below the
/// threshold, `nll_max_epochs` pass, or `max_steps` steps are taken.
/// Returns the number of steps taken.
pub fn nll_pretrain(state: &mut TrainState, data: &Dataset, max_steps: Option<u64>) -> Result<u64, TrainError> {
    check_data(data)?;
    state.enter_phase(Phase::Nll);
    let mut done = 0;
    while under_limit(done, max_steps) && state.phase_epochs() < state.config.nll_max_epochs as u64 {
        if state.running_nll().is_some_and(|l| l < state.config.nll_stop_threshold) {
            break;
        }
        let m = nll_step(state, data)?;
        log::debug!("nll step {}: {:.4}", m.step, m.nll.unwrap_or(f64::NAN));
        done += 1;
    }
    log::info!("nll phase: {done} steps, running nll {:?}", state.running_nll());
    Ok(done)
}

/// Discriminator pretraining on real pieces against generator samples for
/// `disc_pretrain_epochs` passes (or `max_steps` steps).
pub fn disc_pretrain(state: &mut TrainState, data: &Dataset, max_steps: Option<u64>) -> Result<u64, TrainError> {
    check_data(data)?;
    state.enter_phase(Phase::Disc);
    let mut done = 0;
    while under_limit(done, max_steps) && state.phase_epochs() < state.config.disc_pretrain_epochs as u64 {
        let m = disc_pretrain_step(state, data)?;
        log::debug!("disc step {}: melody {:?} rhythm {:?}", m.step, m.d_m_loss, m.d_r_loss);
        done += 1;
    }
    log::info!("disc phase: {done} steps");
    Ok(done)
}

/// Joint adversarial training for `adv_epochs` passes (or `max_steps` steps).
pub fn run_adversarial(state: &mut TrainState, data: &Dataset, max_steps: Option<u64>) -> Result<u64, TrainError> {
    check_data(data)?;
    state.enter_phase(Phase::Adv);
    let mut done = 0;
    while under_limit(done, max_steps) && state.phase_epochs() < state.config.adv_epochs as u64 {
        let m = adversarial_step(state, data)?;
        log::debug!("adv step {}: total {:?}", m.step, m.total);
        done += 1;
    }
    log::info!("adversarial phase: {done} steps");
    Ok(done)
}
