//! Finite discrete laws over policy profiles and the exchangeability
//! machinery: uniform permutation averaging, the i.i.d.-index extension,
//! and exact total-variation distances between marginals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::profile::{permute_profile, Permutation, PolicyProfile};
use crate::rng::{StreamTag, Streams};

const WEIGHT_SUM_TOL: f64 = 1e-12;
const MEASURE_EQ_TOL: f64 = 1e-9;

/// One weighted profile. `stream_relabel` is estimator metadata, not part of
/// the measure: when set, agent i of this atom simulates with noise
/// substream `stream_relabel[i]`, which realizes permutation averaging with
/// relabeled common random numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LawAtom {
    pub weight: f64,
    pub profile: PolicyProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_relabel: Option<Vec<usize>>,
}

/// A finite discrete probability law over policy profiles.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileLaw {
    pub atoms: Vec<LawAtom>,
}

impl ProfileLaw {
    pub fn from_atoms(atoms: Vec<LawAtom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptySample("law needs at least one atom".into()));
        }
        let n = atoms[0].profile.len();
        for a in &atoms {
            if a.profile.len() != n {
                return Err(Error::SizeMismatch(
                    "all atoms must have the same number of agents".into(),
                ));
            }
            if a.weight < 0.0 {
                return Err(Error::InvalidArgument(format!("negative weight {}", a.weight)));
            }
            if let Some(r) = &a.stream_relabel {
                if r.len() != n {
                    return Err(Error::SizeMismatch("stream relabel length".into()));
                }
            }
        }
        let total =
            crate::util::compensated_sum(&atoms.iter().map(|a| a.weight).collect::<Vec<_>>());
        if (total - 1.0).abs() > WEIGHT_SUM_TOL * (atoms.len() as f64).max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(ProfileLaw { atoms })
    }

    pub fn point_mass(profile: PolicyProfile) -> Self {
        ProfileLaw {
            atoms: vec![LawAtom {
                weight: 1.0,
                profile,
                stream_relabel: None,
            }],
        }
    }

    /// Product law with one shared per-agent marginal: the privately
    /// randomized symmetric class. Guarded against atom explosion.
    pub fn product_symmetric(marginal: &[(Policy, f64)], n: usize) -> Result<Self> {
        let k = marginal.len();
        let count = k.checked_pow(n as u32).unwrap_or(usize::MAX);
        if count > 1_000_000 {
            return Err(Error::ExplosionGuard(format!(
                "{k}^{n} product atoms exceed the exact-mode limit"
            )));
        }
        let mut atoms = Vec::with_capacity(count);
        let mut index = vec![0usize; n];
        loop {
            let mut w = 1.0;
            let mut agents = Vec::with_capacity(n);
            for &i in &index {
                w *= marginal[i].1;
                agents.push(marginal[i].0.clone());
            }
            atoms.push(LawAtom {
                weight: w,
                profile: PolicyProfile::new(agents),
                stream_relabel: None,
            });
            // odometer increment
            let mut pos = 0;
            loop {
                if pos == n {
                    return ProfileLaw::from_atoms(atoms);
                }
                index[pos] += 1;
                if index[pos] < k {
                    break;
                }
                index[pos] = 0;
                pos += 1;
            }
        }
    }

    /// Common-randomness mixture of product-form components: z is drawn
    /// first, then agents randomize independently from the z-th marginal.
    pub fn common_randomness_mixture(
        components: &[(f64, Vec<(Policy, f64)>)],
        n: usize,
    ) -> Result<Self> {
        let mut atoms = Vec::new();
        for (zw, marginal) in components {
            let part = ProfileLaw::product_symmetric(marginal, n)?;
            for a in part.atoms {
                atoms.push(LawAtom {
                    weight: zw * a.weight,
                    profile: a.profile,
                    stream_relabel: None,
                });
            }
        }
        ProfileLaw::from_atoms(atoms)
    }

    pub fn agents(&self) -> usize {
        self.atoms[0].profile.len()
    }

    /// Canonical form: atoms sorted by profile fingerprint with duplicates
    /// merged. Relabel metadata is dropped (it does not affect the measure).
    pub fn canonical(&self) -> ProfileLaw {
        let mut merged: BTreeMap<[u8; 32], (f64, PolicyProfile)> = BTreeMap::new();
        for a in &self.atoms {
            let fp = profile_fingerprint(&a.profile);
            match merged.get_mut(&fp) {
                Some(slot) => slot.0 += a.weight,
                None => {
                    merged.insert(fp, (a.weight, a.profile.clone()));
                }
            }
        }
        ProfileLaw {
            atoms: merged
                .into_values()
                .map(|(weight, profile)| LawAtom {
                    weight,
                    profile,
                    stream_relabel: None,
                })
                .collect(),
        }
    }

    /// Measure equality after canonicalization, comparing weights to 1e-9.
    pub fn measure_eq(&self, other: &ProfileLaw) -> bool {
        let a = self.canonical();
        let b = other.canonical();
        if a.atoms.len() != b.atoms.len() {
            return false;
        }
        a.atoms.iter().zip(&b.atoms).all(|(x, y)| {
            profile_fingerprint(&x.profile) == profile_fingerprint(&y.profile)
                && (x.weight - y.weight).abs() <= MEASURE_EQ_TOL
        })
    }

    /// Law of the profile permuted by tau, per-atom.
    pub fn permuted(&self, tau: &Permutation) -> Result<ProfileLaw> {
        let atoms: Result<Vec<LawAtom>> = self
            .atoms
            .iter()
            .map(|a| {
                Ok(LawAtom {
                    weight: a.weight,
                    profile: permute_profile(&a.profile, tau)?,
                    stream_relabel: match &a.stream_relabel {
                        None => Some(tau.map.clone()),
                        Some(r) => Some(tau.map.iter().map(|&i| r[i]).collect()),
                    },
                })
            })
            .collect();
        Ok(ProfileLaw { atoms: atoms? })
    }
}

/// Stable content hash of a profile (canonical JSON of its policies).
pub fn profile_fingerprint(profile: &PolicyProfile) -> [u8; 32] {
    let json = serde_json::to_vec(profile).expect("profiles serialize");
    let mut h = Sha256::new();
    h.update(&json);
    h.finalize().into()
}

/// Uniform mixture over all permutations of the law's atoms; the output is
/// exchangeable by construction.
pub fn exchangeable_average(law: &ProfileLaw) -> Result<ProfileLaw> {
    let n = law.agents();
    if n > 8 {
        return Err(Error::ExplosionGuard(format!(
            "exact permutation averaging limited to 8 agents, got {n}"
        )));
    }
    let perms = Permutation::enumerate(n);
    let w = 1.0 / perms.len() as f64;
    let mut atoms = Vec::with_capacity(perms.len() * law.atoms.len());
    for tau in &perms {
        for a in &law.permuted(tau)?.atoms {
            let mut a = a.clone();
            a.weight *= w;
            atoms.push(a);
        }
    }
    ProfileLaw::from_atoms(atoms)
}

/// Law of (gamma^{I_1}, .., gamma^{I_m}) with I_k i.i.d. uniform on the N
/// slots, enumerated exactly.
pub fn iid_index_extension(law: &ProfileLaw, m: usize) -> Result<ProfileLaw> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be at least 1".into()));
    }
    let n = law.agents();
    let tuples = (n as f64).powi(m as i32);
    if tuples > 1e6 {
        return Err(Error::ExplosionGuard(format!(
            "{n}^{m} index tuples exceed the exact-mode limit; use the sampled variant"
        )));
    }
    let tuples = tuples as usize;
    let w_tuple = 1.0 / tuples as f64;
    let mut atoms = Vec::new();
    let mut index = vec![0usize; m];
    loop {
        for a in &law.atoms {
            atoms.push(LawAtom {
                weight: a.weight * w_tuple,
                profile: PolicyProfile::new(
                    index.iter().map(|&i| a.profile.agents[i].clone()).collect(),
                ),
                stream_relabel: None,
            });
        }
        let mut pos = 0;
        loop {
            if pos == m {
                let law = ProfileLaw::from_atoms(atoms)?;
                return Ok(law.canonical());
            }
            index[pos] += 1;
            if index[pos] < n {
                break;
            }
            index[pos] = 0;
            pos += 1;
        }
    }
}

/// Monte Carlo variant of the extension for large N^m; returns the sampled
/// law and the worst-case standard error of its atom weights.
pub fn iid_index_extension_sampled(
    law: &ProfileLaw,
    m: usize,
    samples: usize,
    seed: u64,
) -> Result<(ProfileLaw, f64)> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let n = law.agents();
    let streams = Streams::derived(seed, "iid-index-extension");
    let w = 1.0 / samples as f64;
    let mut atoms = Vec::with_capacity(samples * law.atoms.len());
    for s in 0..samples {
        let mut idx = Vec::with_capacity(m);
        for j in 0..m {
            let u = streams.uniform(StreamTag::Generic(0xE), s as u64, j as u64, 0, 0);
            idx.push(((u * n as f64) as usize).min(n - 1));
        }
        for a in &law.atoms {
            atoms.push(LawAtom {
                weight: a.weight * w,
                profile: PolicyProfile::new(
                    idx.iter().map(|&i| a.profile.agents[i].clone()).collect(),
                ),
                stream_relabel: None,
            });
        }
    }
    let out = ProfileLaw::from_atoms(atoms)?.canonical();
    // worst-case binomial standard error of a sampled weight
    let se = (0.25 / samples as f64).sqrt();
    Ok((out, se))
}

/// Restriction of the law to its first m agent slots.
pub fn marginal(law: &ProfileLaw, m: usize) -> Result<ProfileLaw> {
    if m == 0 || m > law.agents() {
        return Err(Error::InvalidArgument(format!(
            "marginal size {m} out of range for {} agents",
            law.agents()
        )));
    }
    let atoms = law
        .atoms
        .iter()
        .map(|a| LawAtom {
            weight: a.weight,
            profile: PolicyProfile::new(a.profile.agents[..m].to_vec()),
            stream_relabel: None,
        })
        .collect();
    Ok(ProfileLaw { atoms }.canonical())
}

/// Exact total-variation distance (half L1 over the joint finite support)
/// between the m-slot marginals of the two laws.
pub fn marginal_tv_gap(law_a: &ProfileLaw, law_b: &ProfileLaw, m: usize) -> Result<f64> {
    let a = marginal(law_a, m.min(law_a.agents()))?;
    let b = marginal(law_b, m.min(law_b.agents()))?;
    let mut weights: BTreeMap<[u8; 32], (f64, f64)> = BTreeMap::new();
    for atom in &a.atoms {
        weights.entry(profile_fingerprint(&atom.profile)).or_default().0 += atom.weight;
    }
    for atom in &b.atoms {
        weights.entry(profile_fingerprint(&atom.profile)).or_default().1 += atom.weight;
    }
    Ok(0.5 * weights.values().map(|(wa, wb)| (wa - wb).abs()).sum::<f64>())
}

/// Whether the law equals its image under permutations: all |S_N| of them in
/// exact mode (N <= 8), or a stated random subset in sampled mode.
pub enum ExchangeabilityMode {
    Exact,
    Sampled { count: usize, seed: u64 },
}

pub fn is_exchangeable(law: &ProfileLaw, mode: ExchangeabilityMode) -> Result<bool> {
    let n = law.agents();
    match mode {
        ExchangeabilityMode::Exact => {
            if n > 8 {
                return Err(Error::ExplosionGuard(format!(
                    "exact exchangeability check limited to 8 agents, got {n}"
                )));
            }
            for tau in Permutation::enumerate(n) {
                if !law.measure_eq(&law.permuted(&tau)?) {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        ExchangeabilityMode::Sampled { count, seed } => {
            let streams = Streams::derived(seed, "exchangeability-sample");
            for s in 0..count {
                let tau = crate::profile::random_permutation(n, &streams, s as u64);
                if !law.measure_eq(&law.permuted(&tau)?) {
                    return Ok(false);
                }
            }
            Ok(true)
        }
    }
}
