//! Policy profiles, agent permutations, and the symmetrization operators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::law::{LawAtom, ProfileLaw};
use crate::policy::Policy;
use crate::rng::{StreamTag, Streams};

/// An N-tuple of per-agent policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyProfile {
    pub agents: Vec<Policy>,
}

impl PolicyProfile {
    pub fn new(agents: Vec<Policy>) -> Self {
        PolicyProfile { agents }
    }

    pub fn symmetric(policy: Policy, n: usize) -> Self {
        PolicyProfile {
            agents: vec![policy; n],
        }
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// True iff all agents hold equal policies.
    pub fn is_symmetric(&self) -> bool {
        self.agents.windows(2).all(|w| w[0] == w[1])
    }
}

/// A bijection of {0, .., n-1}; `map[i]` is the image of i.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation {
    pub map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &v in &map {
            if v >= n || seen[v] {
                return Err(Error::InvalidArgument(format!("not a bijection: {map:?}")));
            }
            seen[v] = true;
        }
        Ok(Permutation { map })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            map: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (i, &v) in self.map.iter().enumerate() {
            inv[v] = i;
        }
        Permutation { map: inv }
    }

    /// Function composition: (self ∘ other)(i) = self(other(i)).
    pub fn compose(&self, other: &Permutation) -> Permutation {
        Permutation {
            map: other.map.iter().map(|&i| self.map[i]).collect(),
        }
    }

    /// All n! permutations in a deterministic order (Heap's algorithm).
    pub fn enumerate(n: usize) -> Vec<Permutation> {
        let mut items: Vec<usize> = (0..n).collect();
        let mut out = Vec::new();
        heap_permute(&mut items, n, &mut out);
        out
    }
}

fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Permutation>) {
    if k <= 1 {
        out.push(Permutation { map: items.clone() });
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Agent i of the output holds policy tau(i) of the input.
pub fn permute_profile(profile: &PolicyProfile, tau: &Permutation) -> Result<PolicyProfile> {
    if tau.len() != profile.len() {
        return Err(Error::SizeMismatch(format!(
            "permutation of size {} applied to profile of size {}",
            tau.len(),
            profile.len()
        )));
    }
    Ok(PolicyProfile {
        agents: tau.map.iter().map(|&i| profile.agents[i].clone()).collect(),
    })
}

/// Pointwise average of deterministic kernels: averaging agent-slot i over
/// all permutations reduces to the uniform average over the N policies.
pub fn symmetrize_profile_convex(profile: &PolicyProfile) -> Result<Policy> {
    let n = profile.len();
    if n == 0 {
        return Err(Error::SizeMismatch("empty profile".into()));
    }
    if !profile.agents.iter().all(|p| p.is_deterministic_kernel()) {
        return Err(Error::Unaveragable(
            "convex symmetrization needs deterministic kernels; use the law form".into(),
        ));
    }
    let first = &profile.agents[0];
    let w = 1.0 / n as f64;
    match first {
        Policy::Linear { k, t_edges, .. } => {
            let mut acc = vec![vec![0.0; k[0].len()]; k.len()];
            let mut extra_acc: Option<Vec<Vec<Vec<f64>>>> = None;
            for p in &profile.agents {
                match p {
                    Policy::Linear {
                        k: pk,
                        t_edges: pe,
                        extra_gains,
                    } if pe == t_edges && pk.len() == k.len() => {
                        add_scaled(&mut acc, pk, w);
                        if !extra_gains.is_empty() {
                            let slot = extra_acc.get_or_insert_with(|| {
                                extra_gains
                                    .iter()
                                    .map(|g| vec![vec![0.0; g[0].len()]; g.len()])
                                    .collect()
                            });
                            for (s, g) in slot.iter_mut().zip(extra_gains) {
                                add_scaled(s, g, w);
                            }
                        }
                    }
                    _ => {
                        return Err(Error::Unaveragable(
                            "linear feedbacks with mismatched shapes".into(),
                        ))
                    }
                }
            }
            Ok(Policy::Linear {
                k: acc,
                t_edges: t_edges.clone(),
                extra_gains: extra_acc.unwrap_or_default(),
            })
        }
        Policy::Grid {
            t_bins,
            x_bins,
            table,
        } => {
            let mut acc = vec![vec![vec![0.0; table[0][0].len()]; table[0].len()]; table.len()];
            for p in &profile.agents {
                match p {
                    Policy::Grid {
                        t_bins: tb,
                        x_bins: xb,
                        table: tt,
                    } if tb == t_bins && xb == x_bins && tt.len() == table.len() => {
                        for (ar, tr) in acc.iter_mut().zip(tt) {
                            for (ac, tc) in ar.iter_mut().zip(tr) {
                                for (a, v) in ac.iter_mut().zip(tc) {
                                    *a += w * v;
                                }
                            }
                        }
                    }
                    _ => {
                        return Err(Error::Unaveragable(
                            "grid kernels with mismatched bins".into(),
                        ))
                    }
                }
            }
            Ok(Policy::Grid {
                t_bins: t_bins.clone(),
                x_bins: x_bins.clone(),
                table: acc,
            })
        }
        Policy::OpenLoop { controls } => {
            let mut acc = vec![vec![0.0; controls[0].len()]; controls.len()];
            for p in &profile.agents {
                match p {
                    Policy::OpenLoop { controls: c } if c.len() == controls.len() => {
                        for (ar, cr) in acc.iter_mut().zip(c) {
                            for (a, v) in ar.iter_mut().zip(cr) {
                                *a += w * v;
                            }
                        }
                    }
                    _ => {
                        return Err(Error::Unaveragable(
                            "open-loop schedules with mismatched lengths".into(),
                        ))
                    }
                }
            }
            Ok(Policy::OpenLoop { controls: acc })
        }
        _ => Err(Error::Unaveragable("unsupported kernel kind".into())),
    }
}

fn add_scaled(acc: &mut [Vec<f64>], mat: &[Vec<f64>], w: f64) {
    for (ar, mr) in acc.iter_mut().zip(mat) {
        for (a, v) in ar.iter_mut().zip(mr) {
            *a += w * v;
        }
    }
}

/// The law placing weight 1/|S_N| on each permuted profile. Exact for
/// N <= 8; beyond that a uniform sample of `sample_count` permutations is
/// used and the atom weights state the sampling explicitly.
pub fn symmetrize_profile_general(
    profile: &PolicyProfile,
    sample_count: usize,
    seed: u64,
) -> ProfileLaw {
    let n = profile.len();
    if n <= 8 {
        let perms = Permutation::enumerate(n);
        let w = 1.0 / perms.len() as f64;
        let atoms = perms
            .into_iter()
            .map(|tau| LawAtom {
                weight: w,
                profile: permute_profile(profile, &tau).expect("sizes match"),
                stream_relabel: Some(tau.map),
            })
            .collect();
        ProfileLaw::from_atoms(atoms).expect("uniform weights")
    } else {
        let streams = Streams::derived(seed, "symmetrize-sample");
        let w = 1.0 / sample_count as f64;
        let mut atoms = Vec::with_capacity(sample_count);
        for s in 0..sample_count {
            let tau = random_permutation(n, &streams, s as u64);
            atoms.push(LawAtom {
                weight: w,
                profile: permute_profile(profile, &tau).expect("sizes match"),
                stream_relabel: Some(tau.map),
            });
        }
        ProfileLaw::from_atoms(atoms).expect("uniform weights")
    }
}

/// Fisher-Yates shuffle driven by the counter-based stream.
pub fn random_permutation(n: usize, streams: &Streams, draw: u64) -> Permutation {
    let mut map: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let u = streams.uniform(StreamTag::Generic(0x9), draw, 0, i as u64, 0);
        let j = ((u * (i + 1) as f64) as usize).min(i);
        map.swap(i, j);
    }
    Permutation { map }
}
