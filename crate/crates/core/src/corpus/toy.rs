use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, NoiseChannel, NoiseConfig, PairedExample, FILLERS};
use crate::error::Result;

/// `(scenario, action, templates)`. Slots are written `{name}`.
pub const TOY_INTENTS: &[(&str, &str, &[&str])] = &[
    ("iot", "on", &[
        "turn on the {light} in the {room}",
        "switch on the {room} {light}",
        "{light} on in the {room} please",
        "can you turn the {light} on",
    ]),
    ("iot", "off", &[
        "turn off the {light} in the {room}",
        "switch off the {room} {light}",
        "{light} off in the {room} please",
        "can you turn the {light} off",
    ]),
    ("iot", "dim", &[
        "dim the {light} in the {room}",
        "make the {room} {light} darker",
        "lower the {light} a bit",
    ]),
    ("audio", "volume_up", &[
        "turn the volume up",
        "make the music louder",
        "increase the volume in the {room}",
    ]),
    ("music", "play", &[
        "play some {genre} music",
        "play {artist}",
        "put on some {artist} songs",
        "i want to hear {genre} in the {room}",
    ]),
    ("weather", "query", &[
        "what is the weather in {city} {day}",
        "will it rain {day}",
        "is it cold in {city} {day}",
    ]),
    ("alarm", "set", &[
        "wake me up at {time}",
        "set an alarm for {time} {day}",
        "alarm at {time} please",
    ]),
    ("alarm", "remove", &[
        "cancel my alarm for {time}",
        "remove the {time} alarm",
        "delete all alarms for {day}",
    ]),
    ("transport", "ticket", &[
        "book a flight to {city} {day}",
        "find me a train ticket to {city}",
        "get a ticket to {city} for {day}",
    ]),
    ("transport", "query", &[
        "when does the next train to {city} leave",
        "how long is the flight to {city}",
        "is my flight to {city} on time",
    ]),
    ("email", "sendemail", &[
        "send an email to {contact}",
        "write to {contact} about {day}",
        "email {contact} that i am late",
    ]),
    ("email", "query", &[
        "do i have new emails",
        "read my emails from {contact}",
        "any messages from {contact} {day}",
    ]),
    ("takeaway", "order", &[
        "order some {food}",
        "i want {food} delivered to the {room}",
        "get me {food} for dinner",
    ]),
    ("lists", "add", &[
        "add {item} to my shopping list",
        "put {item} on the list",
        "remember to buy {item} {day}",
    ]),
    ("calendar", "set", &[
        "schedule a meeting with {contact} {day}",
        "remind me to call {contact} at {time}",
        "add lunch with {contact} to my calendar",
    ]),
    ("calendar", "query", &[
        "what is on my calendar {day}",
        "am i free {day} at {time}",
        "when is my meeting with {contact}",
    ]),
];

const SLOTS: &[(&str, &[&str])] = &[
    ("room", &["kitchen", "bedroom", "hallway", "garage", "office", "bathroom", "basement", "attic", "patio"]),
    ("light", &["light", "lights", "lamp", "lamps"]),
    ("city", &["paris", "london", "boston", "berlin", "austin", "dallas", "denver", "madrid", "dublin", "tokyo"]),
    ("day", &["today", "tomorrow", "monday", "tuesday", "friday", "sunday", "tonight"]),
    ("time", &["seven", "eight", "nine", "ten", "six", "noon", "five"]),
    ("artist", &["adele", "queen", "drake", "abba", "coldplay", "muse", "blur", "oasis"]),
    ("genre", &["jazz", "rock", "pop", "blues", "folk", "metal", "soul"]),
    ("contact", &["mom", "dad", "john", "sarah", "alex", "anna", "peter"]),
    ("food", &["pizza", "sushi", "tacos", "noodles", "burgers", "curry"]),
    ("item", &["milk", "eggs", "bread", "butter", "apples", "rice"]),
];

/// Near-homophones of template words that never appear in clean text.
const DISTRACTORS: &[&str] = &[
    "night", "right", "fight", "might", "sight", "one", "won", "own", "an", "hen", "then", "tan",
    "heaven", "eleven", "whether", "feather", "brain", "main", "plane", "camp", "damp", "him",
    "them", "candle", "farm", "harm", "calm", "mail", "male", "tail", "border", "lost", "fist",
    "magic", "column", "look", "cook", "sent", "end", "bend", "clay", "lay", "pay", "bay", "for",
    "four", "fine", "nice", "tree", "free", "wait", "weight", "bye", "buy", "by", "sue", "shoe",
    "cold", "gold", "hold", "sold", "lunch", "bunch", "rock", "lock", "sock",
];

fn slot_values(name: &str) -> &'static [&'static str] {
    SLOTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, v)| *v)
        .unwrap_or_else(|| panic!("template uses unknown slot {name}"))
}

/// Every word the toy corpus can produce in clean text, plus confusable
/// distractors and insertion fillers.
pub fn toy_lexicon() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for (_, _, templates) in TOY_INTENTS {
        for t in *templates {
            words.extend(
                t.split_whitespace()
                    .filter(|w| !w.starts_with('{'))
                    .map(str::to_string),
            );
        }
    }
    for (_, values) in SLOTS {
        words.extend(values.iter().map(|s| s.to_string()));
    }
    words.extend(DISTRACTORS.iter().map(|s| s.to_string()));
    words.extend(FILLERS.iter().map(|s| s.to_string()));
    words.sort();
    words.dedup();
    words
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_examples: usize,
    /// Probability that an example's label is replaced by a different intent.
    pub label_noise: f64,
    /// Emit `(scenario, action)` labels instead of a single intent name.
    pub joint_labels: bool,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_examples: 1000,
            label_noise: 0.0,
            joint_labels: true,
            noise: NoiseConfig::default(),
            seed: 0,
            id_prefix: "toy".into(),
        }
    }
}

fn fill<R: Rng + ?Sized>(template: &str, rng: &mut R) -> String {
    template
        .split_whitespace()
        .map(|w| match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
            Some(slot) => *slot_values(slot).choose(rng).expect("slot values nonempty"),
            None => w,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn label_of(intent: usize, joint: bool) -> Label {
    let (scenario, action, _) = TOY_INTENTS[intent];
    if joint {
        Label::Slurp {
            scenario: scenario.into(),
            action: action.into(),
        }
    } else {
        Label::Intent(format!("{scenario}_{action}"))
    }
}

/// Templated utterances with uniformly drawn intents, each paired with a
/// hypothesis from the noise channel.
pub fn generate_toy(cfg: &ToyConfig) -> Result<Vec<PairedExample>> {
    let channel = NoiseChannel::new(cfg.noise.clone(), toy_lexicon())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_examples);
    for i in 0..cfg.n_examples {
        let intent = rng.random_range(0..TOY_INTENTS.len());
        let template = TOY_INTENTS[intent].2.choose(&mut rng).expect("templates nonempty");
        let clean = fill(template, &mut rng);
        let asr = channel.apply(&clean, &mut rng);
        let mut labelled = intent;
        if cfg.label_noise > 0.0 && rng.random::<f64>() < cfg.label_noise {
            labelled = (intent + rng.random_range(1..TOY_INTENTS.len())) % TOY_INTENTS.len();
        }
        out.push(PairedExample::new(
            format!("{}{i}", cfg.id_prefix),
            clean,
            asr,
            label_of(labelled, cfg.joint_labels),
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelSpace;

    #[test]
    fn every_template_fills() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lex = toy_lexicon();
        for (_, _, templates) in TOY_INTENTS {
            for t in *templates {
                let s = fill(t, &mut rng);
                assert!(!s.contains('{'));
                assert!(s.split_whitespace().all(|w| lex.binary_search(&w.to_string()).is_ok()));
            }
        }
    }

    #[test]
    fn deterministic_and_labelled() {
        let cfg = ToyConfig {
            n_examples: 300,
            ..ToyConfig::default()
        };
        let a = generate_toy(&cfg).unwrap();
        assert_eq!(a, generate_toy(&cfg).unwrap());
        let space = LabelSpace::from_examples(&a).unwrap();
        assert_eq!(space.heads.len(), 2);
        let intents: std::collections::BTreeSet<_> = a.iter().map(|e| e.label.clone()).collect();
        assert_eq!(intents.len(), TOY_INTENTS.len());
    }

    #[test]
    fn label_noise_flips_roughly_the_requested_share() {
        let cfg = ToyConfig {
            n_examples: 2000,
            label_noise: 0.2,
            joint_labels: false,
            ..ToyConfig::default()
        };
        let noisy = generate_toy(&cfg).unwrap();
        let flipped = noisy
            .iter()
            .filter(|e| {
                let Label::Intent(l) = &e.label else { unreachable!() };
                let (s, a) = l.split_once('_').unwrap();
                let idx = TOY_INTENTS.iter().position(|(x, y, _)| *x == s && *y == a).unwrap();
                !TOY_INTENTS[idx].2.iter().any(|t| matches_template(t, &e.clean))
            })
            .count();
        let rate = flipped as f64 / noisy.len() as f64;
        assert!((rate - 0.2).abs() < 0.04, "rate {rate}");
    }

    #[test]
    fn noise_median_is_calibrated() {
        let ex = generate_toy(&ToyConfig {
            n_examples: 2000,
            ..ToyConfig::default()
        })
        .unwrap();
        let mut wers: Vec<f64> = ex.iter().map(|e| e.wer).collect();
        wers.sort_by(f64::total_cmp);
        let median = (wers[999] + wers[1000]) / 2.0;
        assert!((median - 0.25).abs() <= 0.05, "median {median}");
        assert!(wers.iter().any(|w| *w == 0.0));
        assert!(wers.iter().any(|w| *w > 0.4));
    }

    fn matches_template(template: &str, text: &str) -> bool {
        let t: Vec<&str> = template.split_whitespace().collect();
        let w: Vec<&str> = text.split_whitespace().collect();
        t.len() == w.len()
            && t.iter().zip(&w).all(|(a, b)| {
                a.strip_prefix('{')
                    .and_then(|s| s.strip_suffix('}'))
                    .map_or(a == b, |slot| slot_values(slot).contains(b))
            })
    }
}
