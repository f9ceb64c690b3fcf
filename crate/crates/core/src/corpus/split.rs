use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, UserCorpus, UserMessages};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    /// Whole users held out for development.
    pub dev_unseen: f64,
    /// Whole users held out for testing.
    pub test_unseen: f64,
    /// Fraction of training users whose latest messages are held out.
    pub seen_users: f64,
    /// Fraction of each sampled user's messages (latest by timestamp) held out.
    pub heldout_messages: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            dev_unseen: 0.1,
            test_unseen: 0.2,
            seen_users: 0.1,
            heldout_messages: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: UserCorpus,
    pub dev_unseen: UserCorpus,
    pub test_unseen: UserCorpus,
    /// Later messages of some training users.
    pub dev_seen_heldout: UserCorpus,
}

fn count(n: usize, f: f64) -> usize {
    (n as f64 * f).round() as usize
}

/// Partitions users into train and unseen splits, then moves the latest
/// messages of a sample of training users into the seen-heldout split.
/// Deterministic in `seed`; output users keep corpus order.
pub fn split_users(
    corpus: &UserCorpus,
    fr: &SplitFractions,
    seed: u64,
) -> Result<Splits, CorpusError> {
    for (name, f) in [
        ("dev_unseen", fr.dev_unseen),
        ("test_unseen", fr.test_unseen),
        ("seen_users", fr.seen_users),
        ("heldout_messages", fr.heldout_messages),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(CorpusError::InvalidArgument(format!(
                "{name} fraction {f} outside [0, 1]"
            )));
        }
    }
    if fr.dev_unseen + fr.test_unseen > 1.0 {
        return Err(CorpusError::InvalidArgument(
            "unseen fractions sum above 1".into(),
        ));
    }
    let n = corpus.len();
    let n_dev = count(n, fr.dev_unseen);
    let n_test = count(n, fr.test_unseen);
    let needed = |k: usize, f: f64| if f > 0.0 { k.max(1) } else { k };
    let (n_dev, n_test) = (needed(n_dev, fr.dev_unseen), needed(n_test, fr.test_unseen));
    if n_dev + n_test + 1 > n {
        return Err(CorpusError::TooFewUsers {
            needed: n_dev + n_test + 1,
            available: n,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut role = vec![0u8; n]; // 0 train, 1 dev, 2 test
    for &i in &order[..n_dev] {
        role[i] = 1;
    }
    for &i in &order[n_dev..n_dev + n_test] {
        role[i] = 2;
    }
    let train_idx: Vec<usize> = (0..n).filter(|&i| role[i] == 0).collect();
    let mut eligible: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| corpus.users[i].messages.len() >= 2)
        .collect();
    eligible.shuffle(&mut rng);
    let n_seen = count(train_idx.len(), fr.seen_users).min(eligible.len());
    let mut seen = vec![false; n];
    for &i in &eligible[..n_seen] {
        seen[i] = true;
    }

    let mut out = Splits {
        train: UserCorpus::default(),
        dev_unseen: UserCorpus::default(),
        test_unseen: UserCorpus::default(),
        dev_seen_heldout: UserCorpus::default(),
    };
    for (i, u) in corpus.users.iter().enumerate() {
        match role[i] {
            1 => out.dev_unseen.users.push(u.clone()),
            2 => out.test_unseen.users.push(u.clone()),
            _ if seen[i] && fr.heldout_messages > 0.0 => {
                let m = u.messages.len();
                let k = count(m, fr.heldout_messages).clamp(1, m - 1);
                let (keep, held) = u.messages.split_at(m - k);
                out.train.users.push(UserMessages {
                    user_id: u.user_id.clone(),
                    messages: keep.to_vec(),
                });
                out.dev_seen_heldout.users.push(UserMessages {
                    user_id: u.user_id.clone(),
                    messages: held.to_vec(),
                });
            }
            _ => out.train.users.push(u.clone()),
        }
    }
    Ok(out)
}
