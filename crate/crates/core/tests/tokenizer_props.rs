//! Property tests for the shared tokenizer: lossless round trips over the
//! trained alphabet, encode stability, and tag atomicity.

use std::sync::OnceLock;

use minimt_core::tokenizer::{standard_specials, SubwordTokenizer};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "the", "cat", "sat", "mat", "house", "by", "river", "नमस्ते", "दुनिया", "धन्यवाद", "घर",
    "नदी", "small", "model", "translates", "short", "sentences",
];

fn tok() -> &'static SubwordTokenizer {
    use rand::seq::SliceRandom as _;
    use rand::{Rng as _, SeedableRng as _};
    static TOK: OnceLock<SubwordTokenizer> = OnceLock::new();
    TOK.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let corpus: Vec<String> = (0..300)
            .map(|_| {
                let n = rng.gen_range(2..8);
                (0..n)
                    .map(|_| *WORDS.choose(&mut rng).unwrap())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        SubwordTokenizer::train_bpe(&corpus, 160, &standard_specials(&["en", "hi"])).unwrap()
    })
}

fn sentence_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::sample::select(WORDS.to_vec()), 1..8)
        .prop_map(|ws| ws.join(" "))
}

proptest! {
    /// decode(encode(s)) == s for any sentence over the trained alphabet.
    #[test]
    fn decode_inverts_encode(s in sentence_strategy()) {
        let t = tok();
        prop_assert_eq!(t.decode(&t.encode(&s)).unwrap(), s);
    }

    /// Canonical encodings are stable: encode(decode(encode(s))) == encode(s).
    #[test]
    fn encode_is_stable_on_canonical_ids(s in sentence_strategy()) {
        let t = tok();
        let ids = t.encode(&s);
        prop_assert!(!ids.contains(&t.unk_id()));
        let again = t.encode(&t.decode(&ids).unwrap());
        prop_assert_eq!(again, ids);
    }

    /// No encoding ever contains a partial language tag: '#' only appears
    /// inside atomic tag tokens.
    #[test]
    fn tags_never_split(pre in sentence_strategy(), post in sentence_strategy()) {
        let t = tok();
        let text = format!("{pre}#hi#>{post} #en#> tail");
        let ids = t.encode(&text);
        let hi = t.tag_id("#hi#>").unwrap();
        let en = t.tag_id("#en#>").unwrap();
        prop_assert_eq!(ids.iter().filter(|&&i| i == hi).count(), 1);
        prop_assert_eq!(ids.iter().filter(|&&i| i == en).count(), 1);
        for &id in &ids {
            if id != hi && id != en {
                prop_assert!(!t.token(id).unwrap().contains('#'));
            }
        }
        prop_assert_eq!(t.decode(&ids).unwrap(), text);
    }
}

/// Seeded bulk round trip: a thousand corpus-like sentences survive
/// encode→decode→encode bit-exactly.
#[test]
fn thousand_sentence_round_trip() {
    use rand::seq::SliceRandom as _;
    use rand::{Rng as _, SeedableRng as _};
    let t = tok();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let n = rng.gen_range(1..9);
        let s = (0..n)
            .map(|_| *WORDS.choose(&mut rng).unwrap())
            .collect::<Vec<_>>()
            .join(" ");
        let ids = t.encode(&s);
        let text = t.decode(&ids).unwrap();
        assert_eq!(text, s);
        assert_eq!(t.encode(&text), ids);
    }
}
