//! Seeded templated QA corpus where contexts and responses share most of
//! their words, so a model that matches on word overlap ranks the context
//! itself above real answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::text::{Pair, PairDataset, Split};

const TOPICS: [&str; 158] = [
    "pizza",
    "coffee",
    "tea",
    "pasta",
    "sushi",
    "burgers",
    "tacos",
    "chocolate",
    "cheese",
    "soup",
    "salad",
    "bread",
    "cake",
    "pancakes",
    "noodles",
    "curry",
    "steak",
    "cookies",
    "football",
    "tennis",
    "chess",
    "golf",
    "hockey",
    "basketball",
    "swimming",
    "cycling",
    "running",
    "yoga",
    "skiing",
    "surfing",
    "jazz",
    "rock",
    "opera",
    "reggae",
    "techno",
    "blues",
    "poetry",
    "novels",
    "comics",
    "movies",
    "cartoons",
    "podcasts",
    "museums",
    "camping",
    "gardening",
    "painting",
    "photography",
    "dancing",
    "karaoke",
    "baking",
    "fishing",
    "hiking",
    "puzzles",
    "cats",
    "dogs",
    "horses",
    "trains",
    "boats",
    "robots",
    "rainbows",
    "waffles",
    "donuts",
    "lemonade",
    "smoothies",
    "dumplings",
    "burritos",
    "bagels",
    "muffins",
    "popcorn",
    "pretzels",
    "oatmeal",
    "omelets",
    "sandwiches",
    "lasagna",
    "ramen",
    "kebabs",
    "pudding",
    "cupcakes",
    "volleyball",
    "baseball",
    "rugby",
    "cricket",
    "boxing",
    "archery",
    "bowling",
    "climbing",
    "rowing",
    "sailing",
    "skating",
    "wrestling",
    "fencing",
    "karate",
    "hip-hop",
    "country",
    "folk",
    "punk",
    "metal",
    "gospel",
    "sitcoms",
    "documentaries",
    "anime",
    "musicals",
    "magazines",
    "crosswords",
    "sudoku",
    "origami",
    "knitting",
    "pottery",
    "sculpture",
    "astronomy",
    "birdwatching",
    "chemistry",
    "history",
    "geography",
    "parrots",
    "rabbits",
    "hamsters",
    "turtles",
    "dolphins",
    "penguins",
    "owls",
    "bicycles",
    "rockets",
    "castles",
    "islands",
    "mountains",
    "beaches",
    "forests",
    "deserts",
    "volcanoes",
    "thunderstorms",
    "snowflakes",
    "sunsets",
    "fireworks",
    "lanterns",
    "candles",
    "perfume",
    "sneakers",
    "hats",
    "scarves",
    "watches",
    "guitars",
    "pianos",
    "violins",
    "drums",
    "trumpets",
    "flutes",
    "harps",
    "cellos",
    "podcasting",
    "blogging",
    "vlogging",
    "gaming",
    "coding",
    "cooking",
    "sewing",
    "juggling",
    "magic",
];

struct Template {
    contexts: &'static [&'static str],
    responses: &'static [&'static str],
}

const TEMPLATES: [Template; 6] = [
    Template {
        contexts: &[
            "do you like {t} ?",
            "do you really like {t} ?",
            "tell me , do you like {t} ?",
            "so do you like {t} ?",
        ],
        responses: &[
            "yes , i do like {t} .",
            "i really like {t} .",
            "i like {t} a lot .",
            "of course i like {t} .",
        ],
    },
    Template {
        contexts: &[
            "what is your favorite {t} ?",
            "which {t} is your favorite ?",
            "tell me your favorite {t} ?",
            "so what is your favorite {t} ?",
        ],
        responses: &[
            "my favorite {t} is the classic one .",
            "the classic {t} is my favorite .",
            "i would say the classic {t} .",
            "my favorite is the old {t} .",
        ],
    },
    Template {
        contexts: &[
            "how often do you have {t} ?",
            "do you have {t} often ?",
            "how often is {t} for you ?",
        ],
        responses: &[
            "i have {t} every day .",
            "{t} almost every week for me .",
            "i have {t} now and then .",
        ],
    },
    Template {
        contexts: &[
            "where do you get {t} ?",
            "where can i find good {t} ?",
            "where is the best {t} ?",
        ],
        responses: &[
            "there is great {t} near my home .",
            "you can find good {t} downtown .",
            "the best {t} is in the old town .",
        ],
    },
    Template {
        contexts: &[
            "why do you like {t} so much ?",
            "what makes {t} so good ?",
            "why is {t} so great ?",
        ],
        responses: &[
            "because {t} makes me happy .",
            "{t} always makes me happy .",
            "because {t} is fun and relaxing .",
        ],
    },
    Template {
        contexts: &[
            "when did you first try {t} ?",
            "when was your first {t} ?",
            "when did you start with {t} ?",
        ],
        responses: &[
            "i first tried {t} as a kid .",
            "my first {t} was years ago .",
            "i started with {t} in school .",
        ],
    },
];

const CONTEXT_OPENERS: [&str; 5] = ["", "hey , ", "hi , ", "ok , ", "well , "];
const RESPONSE_OPENERS: [&str; 5] = ["", "well , ", "hmm , ", "honestly , ", "oh , "];
const RESPONSE_CLOSERS: [&str; 4] = ["", " haha", " :)", " for sure"];

/// Shape of the generated corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// How many of the built-in topics to draw from.
    pub topics: usize,
    /// Chance that a reply starts by repeating the question.
    pub quote_probability: f64,
    /// Chance that a repeated question keeps the context's exact wording.
    pub verbatim_probability: f64,
    /// Chance that the whole reply is just the question reworded.
    pub echo_probability: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            topics: 60,
            quote_probability: 0.9,
            verbatim_probability: 0.9,
            echo_probability: 0.1,
        }
    }
}

fn pick(rng: &mut ChaCha8Rng, options: &[&'static str]) -> &'static str {
    options[rng.gen_range(0..options.len())]
}

fn fill(template: &str, topic: &str) -> String {
    template.replace("{t}", topic)
}

/// `n` pairs drawn with `seed` under the default shape.
pub fn synthetic_corpus(seed: u64, n: usize) -> PairDataset {
    synthetic_corpus_with(seed, n, &SyntheticConfig::default())
}

/// `n` pairs drawn with `seed`. The same inputs always give the same corpus.
pub fn synthetic_corpus_with(seed: u64, n: usize, config: &SyntheticConfig) -> PairDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = &TOPICS[..config.topics.clamp(1, TOPICS.len())];
    let pairs = (0..n)
        .map(|_| {
            let topic = pick(&mut rng, topics);
            let t = &TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
            let question = fill(pick(&mut rng, t.contexts), topic);
            let context = format!("{}{question}", pick(&mut rng, &CONTEXT_OPENERS));
            if rng.gen_bool(config.echo_probability) {
                let other = t
                    .contexts
                    .iter()
                    .filter(|c| fill(c, topic) != question)
                    .copied()
                    .collect::<Vec<_>>();
                let reworded = fill(pick(&mut rng, &other), topic);
                let response = format!(
                    "{}{reworded}{}",
                    pick(&mut rng, &RESPONSE_OPENERS),
                    pick(&mut rng, &RESPONSE_CLOSERS)
                );
                return Pair::new(context, response);
            }
            let quoted = if !rng.gen_bool(config.quote_probability) {
                String::new()
            } else if rng.gen_bool(config.verbatim_probability) {
                format!("{question} ")
            } else {
                format!("{} ", fill(pick(&mut rng, t.contexts), topic))
            };
            let response = format!(
                "{quoted}{}{}{}",
                pick(&mut rng, &RESPONSE_OPENERS),
                fill(pick(&mut rng, t.responses), topic),
                pick(&mut rng, &RESPONSE_CLOSERS)
            );
            Pair::new(context, response)
        })
        .collect();
    PairDataset::new(pairs, Split::Train)
}

/// Train, validation and test splits of sizes `train`, `valid`, `test`,
/// cut from one seeded corpus.
pub fn synthetic_splits(
    seed: u64,
    train: usize,
    valid: usize,
    test: usize,
    config: &SyntheticConfig,
) -> (PairDataset, PairDataset, PairDataset) {
    let all = synthetic_corpus_with(seed, train + valid + test, config);
    (
        all.slice(0, train, Split::Train),
        all.slice(train, train + valid, Split::Validation),
        all.slice(train + valid, train + valid + test, Split::Test),
    )
}
