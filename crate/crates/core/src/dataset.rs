//! Bundle-recommendation datasets: loading, validation, splitting, and
//! synthetic generation.
//!
//! A dataset is three binary relations over users, bundles, and items:
//! user-bundle interactions, user-item interactions, and bundle-item
//! affiliations. Only the user-bundle relation is ever split; the other two
//! are fully visible to training.
//!
//! On disk a dataset directory holds `size.txt` (one line `M<TAB>N<TAB>O`)
//! and `user_bundle.txt` / `user_item.txt` / `bundle_item.txt`, one
//! tab-separated 0-indexed pair per line. Split files `train.txt`,
//! `tune.txt`, `test.txt` use the same pair format.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeds;

/// Entity counts plus the three deduplicated, sorted pair relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleDataset {
    pub num_users: usize,
    pub num_bundles: usize,
    pub num_items: usize,
    /// (user, bundle) interactions, sorted ascending, no duplicates.
    pub user_bundle: Vec<(u32, u32)>,
    /// (user, item) interactions, sorted ascending, no duplicates.
    pub user_item: Vec<(u32, u32)>,
    /// (bundle, item) affiliations, sorted ascending, no duplicates.
    pub bundle_item: Vec<(u32, u32)>,
}

impl BundleDataset {
    /// Validate counts and invariants, normalizing the pair lists
    /// (sort + dedup) on the way in.
    pub fn new(
        num_users: usize,
        num_bundles: usize,
        num_items: usize,
        mut user_bundle: Vec<(u32, u32)>,
        mut user_item: Vec<(u32, u32)>,
        mut bundle_item: Vec<(u32, u32)>,
    ) -> Result<Self> {
        sort_dedup(&mut user_bundle);
        sort_dedup(&mut user_item);
        sort_dedup(&mut bundle_item);
        check_range(&user_bundle, num_users, num_bundles, "user", "bundle")?;
        check_range(&user_item, num_users, num_items, "user", "item")?;
        check_range(&bundle_item, num_bundles, num_items, "bundle", "item")?;

        let mut has_items = vec![false; num_bundles];
        for &(b, _) in &bundle_item {
            has_items[b as usize] = true;
        }
        for &(_, b) in &user_bundle {
            if !has_items[b as usize] {
                return Err(Error::InteractedBundleWithoutItems(b as usize));
            }
        }
        Ok(BundleDataset {
            num_users,
            num_bundles,
            num_items,
            user_bundle,
            user_item,
            bundle_item,
        })
    }

    /// Adjacency of one relation as per-left sorted neighbor lists.
    pub fn neighbor_lists(pairs: &[(u32, u32)], left_count: usize) -> Vec<Vec<u32>> {
        let mut lists = vec![Vec::new(); left_count];
        for &(l, r) in pairs {
            lists[l as usize].push(r);
        }
        lists
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            num_users: self.num_users,
            num_bundles: self.num_bundles,
            num_items: self.num_items,
            user_bundle_pairs: self.user_bundle.len(),
            user_item_pairs: self.user_item.len(),
            bundle_item_pairs: self.bundle_item.len(),
            avg_items_per_bundle: if self.num_bundles == 0 {
                0.0
            } else {
                self.bundle_item.len() as f64 / self.num_bundles as f64
            },
        }
    }
}

/// Summary counts for the `inspect` command.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_bundles: usize,
    pub num_items: usize,
    pub user_bundle_pairs: usize,
    pub user_item_pairs: usize,
    pub bundle_item_pairs: usize,
    pub avg_items_per_bundle: f64,
}

/// A 3-way partition of the user-bundle pairs over a base dataset.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub base: BundleDataset,
    pub train: Vec<(u32, u32)>,
    pub validation: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
}

fn sort_dedup(pairs: &mut Vec<(u32, u32)>) {
    pairs.sort_unstable();
    pairs.dedup();
}

fn check_range(
    pairs: &[(u32, u32)],
    left_count: usize,
    right_count: usize,
    left_name: &'static str,
    right_name: &'static str,
) -> Result<()> {
    for &(l, r) in pairs {
        if l as usize >= left_count {
            return Err(Error::IdOutOfRange {
                entity: left_name,
                id: l as usize,
                count: left_count,
            });
        }
        if r as usize >= right_count {
            return Err(Error::IdOutOfRange {
                entity: right_name,
                id: r as usize,
                count: right_count,
            });
        }
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_pairs(path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = read_lines(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let parse = |f: Option<&str>| -> Result<u32> {
            f.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected two integers, got {line:?}"),
            })
        };
        let l = parse(fields.next())?;
        let r = parse(fields.next())?;
        if fields.next().is_some() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected two integers, got {line:?}"),
            });
        }
        pairs.push((l, r));
    }
    Ok(pairs)
}

fn write_pairs(path: &Path, pairs: &[(u32, u32)]) -> Result<()> {
    let mut out = String::with_capacity(pairs.len() * 12);
    for &(l, r) in pairs {
        out.push_str(&format!("{l}\t{r}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load and validate a dataset directory.
pub fn load_dataset(root: &Path) -> Result<BundleDataset> {
    let size_path = root.join("size.txt");
    let text = read_lines(&size_path)?;
    let first = text.lines().next().unwrap_or("");
    let nums: Vec<usize> = first
        .split_whitespace()
        .filter_map(|s| s.parse().ok())
        .collect();
    if nums.len() != 3 {
        return Err(Error::Format {
            path: size_path,
            line: 1,
            msg: format!("expected `M<TAB>N<TAB>O`, got {first:?}"),
        });
    }
    let (m, n, o) = (nums[0], nums[1], nums[2]);
    let user_bundle = parse_pairs(&root.join("user_bundle.txt"))?;
    let user_item = parse_pairs(&root.join("user_item.txt"))?;
    let bundle_item = parse_pairs(&root.join("bundle_item.txt"))?;
    BundleDataset::new(m, n, o, user_bundle, user_item, bundle_item)
}

/// Write a dataset directory in the canonical on-disk format.
pub fn write_dataset(dataset: &BundleDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let size = format!(
        "{}\t{}\t{}\n",
        dataset.num_users, dataset.num_bundles, dataset.num_items
    );
    let size_path = root.join("size.txt");
    let mut f = fs::File::create(&size_path).map_err(|e| Error::io(&size_path, e))?;
    f.write_all(size.as_bytes())
        .map_err(|e| Error::io(&size_path, e))?;
    write_pairs(&root.join("user_bundle.txt"), &dataset.user_bundle)?;
    write_pairs(&root.join("user_item.txt"), &dataset.user_item)?;
    write_pairs(&root.join("bundle_item.txt"), &dataset.bundle_item)?;
    Ok(())
}

/// Floor-rounded split sizes with the remainder assigned to train.
fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    // The 1e-9 nudge keeps exact-decimal products like 10*0.7 from
    // flooring one short of the intended integer.
    let n_train = (n as f64 * ratios.0 + 1e-9).floor() as usize;
    let n_val = (n as f64 * ratios.1 + 1e-9).floor() as usize;
    let n_test = (n as f64 * ratios.2 + 1e-9).floor() as usize;
    let rem = n - (n_train + n_val + n_test);
    (n_train + rem, n_val, n_test)
}

/// Uniform random partition of the user-bundle pairs, deterministic given
/// the seed. Only user-bundle is split.
pub fn split(dataset: &BundleDataset, ratios: (f64, f64, f64), seed: u64) -> Result<SplitDataset> {
    if ratios.0 <= 0.0 || ratios.1 <= 0.0 || ratios.2 <= 0.0 {
        return Err(Error::InvalidRatios(ratios));
    }
    if (ratios.0 + ratios.1 + ratios.2 - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(ratios));
    }
    let mut pairs = dataset.user_bundle.clone();
    let mut rng = seeds::rng(seed, "split", &[]);
    pairs.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(pairs.len(), ratios);
    let mut train = pairs[..n_train].to_vec();
    let mut validation = pairs[n_train..n_train + n_val].to_vec();
    let mut test = pairs[n_train + n_val..].to_vec();
    sort_dedup(&mut train);
    sort_dedup(&mut validation);
    sort_dedup(&mut test);
    Ok(SplitDataset {
        base: dataset.clone(),
        train,
        validation,
        test,
    })
}

/// Load `train.txt` / `tune.txt` / `test.txt` from a dataset directory,
/// checking that they partition the base user-bundle relation.
pub fn load_split_files(root: &Path, base: BundleDataset) -> Result<SplitDataset> {
    let mut train = parse_pairs(&root.join("train.txt"))?;
    let mut validation = parse_pairs(&root.join("tune.txt"))?;
    let mut test = parse_pairs(&root.join("test.txt"))?;
    sort_dedup(&mut train);
    sort_dedup(&mut validation);
    sort_dedup(&mut test);
    let mut union = Vec::with_capacity(train.len() + validation.len() + test.len());
    union.extend_from_slice(&train);
    union.extend_from_slice(&validation);
    union.extend_from_slice(&test);
    union.sort_unstable();
    let total = train.len() + validation.len() + test.len();
    union.dedup();
    if union.len() != total || union != base.user_bundle {
        return Err(Error::Config(
            "split files do not partition user_bundle".into(),
        ));
    }
    Ok(SplitDataset {
        base,
        train,
        validation,
        test,
    })
}

/// Write the three split files next to the dataset files.
pub fn write_split_files(split: &SplitDataset, root: &Path) -> Result<()> {
    write_pairs(&root.join("train.txt"), &split.train)?;
    write_pairs(&root.join("tune.txt"), &split.validation)?;
    write_pairs(&root.join("test.txt"), &split.test)?;
    Ok(())
}

/// Parameters of the planted-block synthetic generator.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub bundles: usize,
    pub items: usize,
    pub blocks: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

// Degree targets for the generator. Kept deliberately sparse on the
// user-bundle side so the item view carries complementary signal.
const BUNDLES_PER_USER: usize = 4;
const ITEMS_PER_USER: usize = 10;
const ITEMS_PER_BUNDLE: usize = 5;

/// Draw `count` distinct right-ids for one left entity. Each draw picks the
/// home community's pool with probability 1-noise_rate and the full range
/// otherwise, so noise_rate=1 is uniform over everything.
fn draw_distinct(
    rng: &mut rand_chacha::ChaCha8Rng,
    count: usize,
    community: usize,
    per_block: usize,
    total: usize,
    noise_rate: f64,
) -> BTreeSet<u32> {
    let mut chosen = BTreeSet::new();
    let count = count.min(total);
    while chosen.len() < count {
        let cross = rng.random::<f64>() < noise_rate;
        let id = if cross {
            rng.random_range(0..total)
        } else {
            community * per_block + rng.random_range(0..per_block)
        };
        chosen.insert(id as u32);
    }
    chosen
}

/// Generate a planted-block dataset: entities are partitioned into
/// `blocks` communities and interactions stay within community except for
/// a `noise_rate` fraction drawn uniformly over the whole range.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<BundleDataset> {
    if !(0.0..=1.0).contains(&spec.noise_rate) {
        return Err(Error::InvalidNoiseRate(spec.noise_rate));
    }
    if spec.blocks == 0
        || !spec.users.is_multiple_of(spec.blocks)
        || !spec.bundles.is_multiple_of(spec.blocks)
        || !spec.items.is_multiple_of(spec.blocks)
    {
        return Err(Error::BlocksDoNotDivide {
            blocks: spec.blocks,
            users: spec.users,
            bundles: spec.bundles,
            items: spec.items,
        });
    }
    let users_pb = spec.users / spec.blocks;
    let bundles_pb = spec.bundles / spec.blocks;
    let items_pb = spec.items / spec.blocks;
    let mut rng = seeds::rng(spec.seed, "synthetic", &[]);

    let mut bundle_item = Vec::new();
    for b in 0..spec.bundles {
        let community = b / bundles_pb;
        let items = draw_distinct(
            &mut rng,
            ITEMS_PER_BUNDLE,
            community,
            items_pb,
            spec.items,
            spec.noise_rate,
        );
        bundle_item.extend(items.into_iter().map(|i| (b as u32, i)));
    }

    let mut user_bundle = Vec::new();
    let mut user_item = Vec::new();
    for u in 0..spec.users {
        let community = u / users_pb;
        let bundles = draw_distinct(
            &mut rng,
            BUNDLES_PER_USER,
            community,
            bundles_pb,
            spec.bundles,
            spec.noise_rate,
        );
        user_bundle.extend(bundles.into_iter().map(|b| (u as u32, b)));
        let items = draw_distinct(
            &mut rng,
            ITEMS_PER_USER,
            community,
            items_pb,
            spec.items,
            spec.noise_rate,
        );
        user_item.extend(items.into_iter().map(|i| (u as u32, i)));
    }

    BundleDataset::new(
        spec.users,
        spec.bundles,
        spec.items,
        user_bundle,
        user_item,
        bundle_item,
    )
}

impl SyntheticSpec {
    /// Parse the CLI shorthand `users,bundles,items,blocks,noise_rate`.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::Config(format!(
                "synthetic spec must be `users,bundles,items,blocks,noise_rate`, got {text:?}"
            )));
        }
        let dim = |i: usize| -> Result<usize> {
            parts[i]
                .parse()
                .map_err(|_| Error::Config(format!("bad synthetic field {:?}", parts[i])))
        };
        let noise_rate: f64 = parts[4]
            .parse()
            .map_err(|_| Error::Config(format!("bad noise rate {:?}", parts[4])))?;
        Ok(SyntheticSpec {
            users: dim(0)?,
            bundles: dim(1)?,
            items: dim(2)?,
            blocks: dim(3)?,
            noise_rate,
            seed,
        })
    }
}

/// Community of an entity id under contiguous-chunk assignment.
pub fn community_of(id: u32, total: usize, blocks: usize) -> usize {
    id as usize / (total / blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> BundleDataset {
        BundleDataset::new(
            3,
            2,
            4,
            vec![(0, 0), (1, 1), (2, 1)],
            vec![(0, 0), (0, 1), (1, 2)],
            vec![(0, 0), (0, 1), (1, 2), (1, 3)],
        )
        .unwrap()
    }

    #[test]
    fn duplicate_pairs_count_once() {
        let d = BundleDataset::new(
            2,
            1,
            1,
            vec![(0, 0), (0, 0), (1, 0)],
            vec![],
            vec![(0, 0)],
        )
        .unwrap();
        assert_eq!(d.user_bundle.len(), 2);
    }

    #[test]
    fn empty_user_item_is_valid() {
        let d = BundleDataset::new(2, 1, 5, vec![(0, 0)], vec![], vec![(0, 0)]).unwrap();
        assert_eq!(d.user_item.len(), 0);
    }

    #[test]
    fn out_of_range_rejected() {
        let err = BundleDataset::new(2, 1, 1, vec![(2, 0)], vec![], vec![(0, 0)]).unwrap_err();
        assert!(matches!(err, Error::IdOutOfRange { .. }));
    }

    #[test]
    fn interacted_bundle_without_items_rejected() {
        let err = BundleDataset::new(2, 2, 1, vec![(0, 1)], vec![], vec![(0, 0)]).unwrap_err();
        assert!(matches!(err, Error::InteractedBundleWithoutItems(1)));
    }

    #[test]
    fn uninteracted_bundle_without_items_allowed() {
        let d = BundleDataset::new(2, 2, 1, vec![(0, 0)], vec![], vec![(0, 0)]).unwrap();
        assert_eq!(d.num_bundles, 2);
    }

    #[test]
    fn roundtrip_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        write_dataset(&d, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(d, loaded);
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("bundle_item.txt")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            Error::MissingFile(p) => assert!(p.ends_with("bundle_item.txt")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn split_sizes_exact() {
        assert_eq!(split_sizes(10, (0.7, 0.1, 0.2)), (7, 1, 2));
        assert_eq!(split_sizes(51377, (0.7, 0.1, 0.2)), (35965, 5137, 10275));
    }

    #[test]
    fn split_partition_and_determinism() {
        let spec = SyntheticSpec {
            users: 20,
            bundles: 10,
            items: 30,
            blocks: 2,
            noise_rate: 0.2,
            seed: 3,
        };
        let d = generate_synthetic(&spec).unwrap();
        let a = split(&d, (0.7, 0.1, 0.2), 1).unwrap();
        let b = split(&d, (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.test, b.test);
        let mut union = a.train.clone();
        union.extend_from_slice(&a.validation);
        union.extend_from_slice(&a.test);
        union.sort_unstable();
        assert_eq!(union, d.user_bundle);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let d = tiny();
        assert!(matches!(
            split(&d, (0.0, 0.5, 0.5), 1),
            Err(Error::InvalidRatios(_))
        ));
        assert!(matches!(
            split(&d, (0.5, 0.3, 0.3), 1),
            Err(Error::InvalidRatios(_))
        ));
    }

    #[test]
    fn split_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            users: 10,
            bundles: 5,
            items: 20,
            blocks: 5,
            noise_rate: 0.1,
            seed: 9,
        };
        let d = generate_synthetic(&spec).unwrap();
        let s = split(&d, (0.7, 0.1, 0.2), 4).unwrap();
        write_dataset(&d, dir.path()).unwrap();
        write_split_files(&s, dir.path()).unwrap();
        let base = load_dataset(dir.path()).unwrap();
        let loaded = load_split_files(dir.path(), base).unwrap();
        assert_eq!(loaded.train, s.train);
        assert_eq!(loaded.validation, s.validation);
        assert_eq!(loaded.test, s.test);
    }

    #[test]
    fn synthetic_invariants_hold() {
        let spec = SyntheticSpec {
            users: 100,
            bundles: 50,
            items: 200,
            blocks: 5,
            noise_rate: 0.1,
            seed: 7,
        };
        let d = generate_synthetic(&spec).unwrap();
        assert_eq!(d.num_users, 100);
        let again = generate_synthetic(&spec).unwrap();
        assert_eq!(d, again);
        // every bundle has at least one item
        let mut has = vec![false; d.num_bundles];
        for &(b, _) in &d.bundle_item {
            has[b as usize] = true;
        }
        assert!(has.iter().all(|&x| x));
    }

    #[test]
    fn synthetic_noiseless_stays_in_community() {
        let spec = SyntheticSpec {
            users: 50,
            bundles: 25,
            items: 100,
            blocks: 5,
            noise_rate: 0.0,
            seed: 11,
        };
        let d = generate_synthetic(&spec).unwrap();
        for &(u, b) in &d.user_bundle {
            assert_eq!(
                community_of(u, d.num_users, 5),
                community_of(b, d.num_bundles, 5)
            );
        }
    }

    #[test]
    fn synthetic_full_noise_is_uniform() {
        let spec = SyntheticSpec {
            users: 2000,
            bundles: 1000,
            items: 4000,
            blocks: 4,
            noise_rate: 1.0,
            seed: 13,
        };
        let d = generate_synthetic(&spec).unwrap();
        let within = d
            .user_bundle
            .iter()
            .filter(|&&(u, b)| {
                community_of(u, d.num_users, 4) == community_of(b, d.num_bundles, 4)
            })
            .count();
        let rate = within as f64 / d.user_bundle.len() as f64;
        // expected 1/4; ~8000 samples, allow 5 sigma
        let sigma = (0.25 * 0.75 / d.user_bundle.len() as f64).sqrt();
        assert!(
            (rate - 0.25).abs() < 5.0 * sigma,
            "within-community rate {rate} too far from 0.25"
        );
    }

    #[test]
    fn synthetic_rejects_bad_params() {
        let mut spec = SyntheticSpec {
            users: 10,
            bundles: 5,
            items: 20,
            blocks: 3,
            noise_rate: 0.5,
            seed: 1,
        };
        assert!(matches!(
            generate_synthetic(&spec),
            Err(Error::BlocksDoNotDivide { .. })
        ));
        spec.blocks = 5;
        spec.noise_rate = 1.5;
        assert!(matches!(
            generate_synthetic(&spec),
            Err(Error::InvalidNoiseRate(_))
        ));
    }

    // Reference statistics of the public Youshu dump; runs only when the
    // dataset directory is available locally.
    #[test]
    fn youshu_statistics_when_present() {
        let Ok(dir) = std::env::var("BUNDLEREC_YOUSHU_DIR") else {
            return;
        };
        let d = load_dataset(Path::new(&dir)).unwrap();
        assert_eq!(d.num_users, 8039);
        assert_eq!(d.num_bundles, 4771);
        assert_eq!(d.num_items, 32770);
        assert_eq!(d.user_item.len(), 138_515);
        assert_eq!(d.user_bundle.len(), 51_377);
    }

    proptest! {
        #[test]
        fn split_is_partition(n in 1usize..60, seed in 0u64..500) {
            let pairs: Vec<(u32, u32)> = (0..n).map(|i| (i as u32, 0)).collect();
            let d = BundleDataset::new(n, 1, 1, pairs, vec![], vec![(0, 0)]).unwrap();
            let s = split(&d, (0.7, 0.1, 0.2), seed).unwrap();
            let mut union = s.train.clone();
            union.extend_from_slice(&s.validation);
            union.extend_from_slice(&s.test);
            let total = union.len();
            union.sort_unstable();
            union.dedup();
            prop_assert_eq!(union.len(), total);
            prop_assert_eq!(union, d.user_bundle);
        }
    }
}
