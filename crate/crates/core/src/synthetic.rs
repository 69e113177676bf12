//! Seeded synthetic product corpus in the review-dump layout (one JSON review
//! per line plus one JSON metadata record per item). Used for demos and the
//! end-to-end tests.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::fsutil::write_atomic;

pub const REVIEWS_FILE: &str = "reviews.jsonl";
pub const METADATA_FILE: &str = "meta.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 50,
            items: 120,
            min_interactions: 6,
            max_interactions: 14,
            seed: 20240501,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub reviews: String,
    pub metadata: String,
}

const ADJECTIVES: &[&str] = &[
    "Hydrating", "Gentle", "Radiant", "Matte", "Velvet", "Fresh", "Botanical", "Silky", "Nourishing", "Clarifying",
    "Soothing", "Bright", "Daily", "Night", "Vitamin C", "Rose",
];
const PRODUCTS: &[&str] = &[
    "Face Serum", "Lip Balm", "Night Cream", "Cleanser", "Shampoo", "Conditioner", "Eye Shadow Palette", "Sunscreen",
    "Body Lotion", "Hand Cream", "Face Mask", "Mascara", "Toner", "Hair Oil", "Nail Polish",
];
const BRANDS: &[&str] = &["Luma", "Verdant", "Oriel", "Kessa", "Blume", "Nordic Leaf", "Aurae", "Solis"];
const FEATURES: &[&str] = &[
    "fragrance free", "with hyaluronic acid", "for sensitive skin", "with shea butter", "long lasting", "travel size",
    "cruelty free", "with SPF 30", "lightweight formula", "with argan oil",
];
const PRAISE: &[&str] = &[
    "Absolutely love this, it works better than anything I tried before.",
    "Smells lovely and my skin feels soft all day.",
    "Great value and the texture is pleasant.",
    "Noticeable difference after a week, will buy again.",
    "Light, absorbs quickly and does not leave residue.",
];
const MIXED: &[&str] = &[
    "It is fine but nothing special for the price.",
    "Works okay, although the scent is a bit strong.",
    "Decent product, packaging could be better.",
];
const COMPLAINTS: &[&str] = &[
    "Broke me out after two days, returning it.",
    "The smell is overpowering and it feels greasy.",
    "Did not notice any effect at all, waste of money.",
    "Pump stopped working and half the bottle was stuck.",
    "Too drying for my skin and it stings a little.",
];

fn asin(i: usize) -> String {
    format!("B{:09}", 100_000 + i)
}

fn user_id(u: usize) -> String {
    format!("A{:05}SYN", u + 1)
}

/// Draws a star rating biased by how well user taste matches the item.
fn rating(rng: &mut ChaCha8Rng, affinity: f64) -> u8 {
    let x: f64 = rng.random::<f64>() * 0.6 + affinity * 0.4;
    match x {
        x if x < 0.18 => 1,
        x if x < 0.32 => 2,
        x if x < 0.48 => 3,
        x if x < 0.70 => 4,
        _ => 5,
    }
}

fn review_text(rng: &mut ChaCha8Rng, stars: u8, title: &str) -> String {
    let pool = match stars {
        1 | 2 => COMPLAINTS,
        3 => MIXED,
        _ => PRAISE,
    };
    let body = pool.choose(rng).expect("non-empty pool");
    format!("Bought the {title}. {body}")
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut metadata = String::new();
    let mut items = Vec::with_capacity(spec.items);
    for i in 0..spec.items {
        let adj = ADJECTIVES.choose(&mut rng).expect("adjectives");
        let product = PRODUCTS.choose(&mut rng).expect("products");
        let brand = BRANDS.choose(&mut rng).expect("brands");
        let feature = FEATURES.choose(&mut rng).expect("features");
        let title = format!("{brand} {adj} {product}");
        let price = format!("${}.{:02}", rng.random_range(4..60), rng.random_range(0..100));
        let quality: f64 = rng.random();
        let mut rec = json!({
            "asin": asin(i),
            "title": title,
            "brand": brand,
            "description": format!("{adj} {} {feature}.", product.to_lowercase()),
        });
        // a few items lack a price to exercise partial metadata
        if i % 7 != 3 {
            rec["price"] = json!(price);
        }
        metadata.push_str(&rec.to_string());
        metadata.push('\n');
        items.push((title, quality));
    }

    let mut reviews = String::new();
    let base_time: i64 = 1_500_000_000;
    for u in 0..spec.users {
        let n = rng.random_range(spec.min_interactions..=spec.max_interactions).min(spec.items);
        let picks = rand::seq::index::sample(&mut rng, spec.items, n);
        let taste: f64 = rng.random();
        let mut t = base_time + rng.random_range(0..86_400 * 30);
        for idx in picks.iter() {
            let (title, quality) = &items[idx];
            let affinity = 1.0 - (taste - quality).abs();
            let stars = rating(&mut rng, affinity);
            t += rng.random_range(3_600..86_400 * 20);
            let text = review_text(&mut rng, stars, title);
            let rec = json!({
                "reviewerID": user_id(u),
                "asin": asin(idx),
                "overall": f64::from(stars),
                "unixReviewTime": t,
                "reviewText": text,
                "summary": format!("{stars} stars"),
            });
            reviews.push_str(&rec.to_string());
            reviews.push('\n');
        }
    }
    SyntheticCorpus { reviews, metadata }
}

impl SyntheticCorpus {
    /// Writes both files into `dir`; returns (reviews, metadata) paths.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<(PathBuf, PathBuf)> {
        let r = dir.join(REVIEWS_FILE);
        let m = dir.join(METADATA_FILE);
        write_atomic(&r, self.reviews.as_bytes())?;
        write_atomic(&m, self.metadata.as_bytes())?;
        Ok((r, m))
    }
}
