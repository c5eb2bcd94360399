//! Templated request/response dialogues with injected factual tokens and
//! one domain label each. Domains use disjoint content words, so they are
//! linearly separable from bag-of-words features.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dialogue, Speaker, Turn};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub n_dialogues: usize,
    pub n_domains: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { n_dialogues: 200, n_domains: 2, seed: 0 }
    }
}

// Small pools so every factual token recurs often enough to enter the
// vocabulary.
const CODES: &[&str] = &["qnvdz4rt", "b7xk2mpa", "zt81wq0c", "h3jd9vle", "m2ru6yfs", "k5ce0gno"];
const TIMES: &[&str] = &["9:15", "11:30", "13:45", "17:00", "18:30", "20:15"];
const COUNTS: &[&str] = &["2", "3", "4", "5", "6"];

/// A customer template and the agent reply that answers it.
type Exchange = (&'static str, &'static str);

struct Domain {
    name: &'static str,
    places: &'static [&'static str],
    opening: &'static [Exchange],
    detail: &'static [Exchange],
    booking: &'static [Exchange],
    farewell: &'static [Exchange],
}

// `{n}`, `{t}`, `{c}` and `{p}` are replaced by a count, time, code and
// place drawn once per dialogue. Agent replies restate the customer's
// slots, as task-oriented agents usually do.
const DOMAINS: &[Domain] = &[
    Domain {
        name: "hotel",
        places: &["alpha", "riverside", "grand", "lodge"],
        opening: &[
            ("i need a hotel room near {p} for {n} nights", "the {p} hotel has a room for {n} nights"),
            ("find me a guesthouse at {p} with parking", "the {p} guesthouse has free parking"),
        ],
        detail: &[
            ("can i check in at {t} ?", "yes , check in at {t} is fine at the {p} hotel"),
            ("does it have wifi and breakfast ?", "the {p} hotel offers wifi and breakfast"),
        ],
        booking: &[
            ("please book the room for {n} guests", "your room for {n} guests is booked , reference {c}"),
            ("reserve the hotel from {t}", "the hotel is reserved from {t} , reference {c}"),
        ],
        farewell: &[("thanks , that is all", "enjoy your stay at the hotel")],
    },
    Domain {
        name: "restaurant",
        places: &["golden", "curry", "bistro", "noodle"],
        opening: &[
            ("i want a table for {n} people at {t}", "the {p} restaurant has a table for {n} at {t}"),
            ("find me an italian place called {p}", "{p} serves italian food in the centre"),
        ],
        detail: &[
            ("do they have a vegetarian menu ?", "yes , {p} has a vegetarian menu"),
            ("is {p} expensive ?", "{p} is cheap with good dessert"),
        ],
        booking: &[
            ("please book a table for {n}", "your table for {n} at {p} is booked , reference {c}"),
            ("reserve dinner at {t}", "dinner at {p} is reserved for {t} , reference {c}"),
        ],
        farewell: &[("thanks , that is all", "enjoy your meal")],
    },
    Domain {
        name: "taxi",
        places: &["station", "airport", "museum", "college"],
        opening: &[
            ("i need a taxi to the {p} at {t}", "a taxi to the {p} at {t} is available"),
            ("send a cab to the {p}", "a cab can drive you to the {p}"),
        ],
        detail: &[
            ("the car must fit {n} passengers", "the car fits {n} passengers"),
            ("can it leave after {t} ?", "the driver can leave after {t}"),
        ],
        booking: &[
            ("yes , book the ride", "your taxi arrives at {t} , contact {c}"),
            ("book it for {n} riders", "the cab for {n} riders is booked , code {c}"),
        ],
        farewell: &[("thanks , that is all", "have a safe ride")],
    },
    Domain {
        name: "train",
        places: &["cambridge", "london", "norwich", "ely"],
        opening: &[
            ("i need a train to {p} after {t}", "a train to {p} leaves at {t}"),
            ("when is the next train to {p} ?", "the next train to {p} departs at {t}"),
        ],
        detail: &[
            ("which platform for {p} ?", "the {p} train uses platform {n}"),
            ("is the railway ticket cheap ?", "the railway ticket to {p} is cheap"),
        ],
        booking: &[
            ("book {n} tickets please", "{n} tickets are booked , train id {c}"),
            ("buy a seat on the {t} train", "your seat on the {t} train is booked , ref {c}"),
        ],
        farewell: &[("thanks , that is all", "enjoy the journey")],
    },
];

pub fn domain_names() -> impl Iterator<Item = &'static str> {
    DOMAINS.iter().map(|d| d.name)
}

fn fill(template: &str, slots: &[(&str, &str)]) -> Vec<String> {
    template.split_whitespace().map(|w| slots.iter().find(|(k, _)| *k == w).map_or(w, |(_, v)| v).to_string()).collect()
}

fn exchange(turns: &mut Vec<Turn>, (x, y): Exchange, slots: &[(&str, &str)]) {
    turns.push(Turn { speaker: Speaker::Customer, tokens: fill(x, slots) });
    turns.push(Turn { speaker: Speaker::Agent, tokens: fill(y, slots) });
}

/// Generates `n_dialogues` dialogues cycling through the first
/// `n_domains` domains: an opening request, an optional follow-up, a
/// booking answered with a reference code, and an optional farewell.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<Dialogue>> {
    if cfg.n_domains == 0 || cfg.n_domains > DOMAINS.len() {
        return Err(Error::InvalidArgument(format!("n_domains must be between 1 and {}", DOMAINS.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_dialogues);
    for i in 0..cfg.n_dialogues {
        let dom = &DOMAINS[i % cfg.n_domains];
        let slots = [
            ("{n}", *COUNTS.choose(&mut rng).expect("non-empty pool")),
            ("{t}", *TIMES.choose(&mut rng).expect("non-empty pool")),
            ("{c}", *CODES.choose(&mut rng).expect("non-empty pool")),
            ("{p}", *dom.places.choose(&mut rng).expect("non-empty pool")),
        ];
        let mut turns = Vec::new();
        exchange(&mut turns, *dom.opening.choose(&mut rng).expect("non-empty pool"), &slots);
        if rng.random_bool(0.5) {
            exchange(&mut turns, *dom.detail.choose(&mut rng).expect("non-empty pool"), &slots);
        }
        exchange(&mut turns, *dom.booking.choose(&mut rng).expect("non-empty pool"), &slots);
        if rng.random_bool(0.5) {
            exchange(&mut turns, *dom.farewell.choose(&mut rng).expect("non-empty pool"), &slots);
        }
        out.push(Dialogue { id: format!("syn-{i:05}"), turns, domains: BTreeSet::from([dom.name.to_string()]) });
    }
    Ok(out)
}
