/// Filler vocabulary. Disjoint from [`KEYS`] and [`EVENTS`] and free of the
/// words used by the fact and event templates.
pub const FILLER: &[&str] = &[
    "a", "an", "the", "of", "to", "in", "on", "at", "by", "and", "or", "but", "as", "so", "we", "it",
    "old", "new", "red", "far", "low", "dry", "warm", "cold", "slow", "soft", "wide", "long", "dark",
    "pale", "quiet", "green", "heavy", "early", "river", "stone", "field", "cloud", "road", "hill",
    "tree", "wind", "rain", "light", "house", "wall", "door", "path", "boat", "bird", "horse",
    "grass", "water", "bread", "paper", "glass", "town", "market", "garden", "window", "table",
    "lamp", "song", "story", "letter", "morning", "evening", "winter", "summer", "walks", "runs",
    "falls", "turns", "holds", "waits", "opens", "sings", "grows", "moves", "rests", "keeps",
    "finds", "carries", "follows", "near", "under", "over", "past", "along", "behind", "between",
    "often", "rarely", "again", "always", "never", "slowly", "gently", "later", "then",
];

/// Fact keys: short, distinct, and none is a prefix of another.
pub const KEYS: &[&str] = &[
    "alpha", "bravo", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
    "mike", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu", "amber", "birch", "cedar", "dahlia", "ember", "fjord", "garnet",
    "hazel", "iris", "jade", "koala", "lotus", "maple", "nectar", "onyx", "pearl", "quartz",
    "raven", "saffron", "topaz", "umber", "violet", "willow", "yarrow", "zircon", "badger",
    "copper", "dingo", "falcon", "gecko", "heron", "ibex", "jackal", "kestrel", "lynx", "marten",
    "newt", "otter", "puffin", "quokka",
];

/// Event labels for timeline documents.
pub const EVENTS: &[&str] = &[
    "flood", "harvest", "eclipse", "wedding", "siege", "fire", "census", "treaty", "plague",
    "coronation", "drought", "festival", "earthquake", "voyage", "uprising", "founding",
];

/// Narrative cues, by narrative position.
pub const CUES: &[&str] = &["First", "Next", "Then", "After that", "Later", "Still later"];
pub const FINAL_CUE: &str = "Finally";

/// Alphabet for fact values: 36 symbols, three per value.
pub const VALUE_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
pub const VALUE_LEN: usize = 3;

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn lists_are_disjoint_and_prefix_free() {
        let keys: HashSet<_> = KEYS.iter().collect();
        assert_eq!(keys.len(), KEYS.len());
        for a in KEYS {
            for b in KEYS {
                assert!(a == b || !b.starts_with(a), "{a} prefixes {b}");
            }
            assert!(!FILLER.contains(a) && !EVENTS.contains(a));
        }
        for banned in ["code", "is", "what", "year", "came"] {
            assert!(!FILLER.contains(&banned));
        }
        assert!(FILLER.contains(&"a"));
    }
}
