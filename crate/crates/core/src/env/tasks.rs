//! Instance generators for the eight tasks.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Goal, NodePath, TaskName};
use crate::dom::{BBox, DomNode};
use crate::text::{mix_seed, stable_hash};

/// Button labels, typed words and checkbox words.
pub const WORDS: [&str; 60] = [
    "ok", "cancel", "yes", "no", "apple", "river", "stone", "cloud", "tiger", "piano", "lemon",
    "rocket", "garden", "silver", "winter", "summer", "forest", "candle", "mirror", "pencil",
    "window", "bottle", "planet", "castle", "dragon", "orange", "violet", "coffee", "butter",
    "marble", "anchor", "bridge", "circle", "desert", "engine", "falcon", "glacier", "harbor",
    "island", "jungle", "kettle", "ladder", "meadow", "needle", "oyster", "parrot", "quartz",
    "rabbit", "saddle", "tunnel", "umbrella", "valley", "walnut", "yellowish", "zebra", "hello",
    "world", "banana", "cherry", "mango",
];

pub const COLORS: [&str; 10] = [
    "red", "green", "blue", "yellow", "purple", "orange", "pink", "brown", "black", "white",
];

pub const CITIES: [&str; 14] = [
    "Philadelphia",
    "Charlotte",
    "Boston",
    "Denver",
    "Seattle",
    "Chicago",
    "Austin",
    "Portland",
    "Miami",
    "Dallas",
    "Atlanta",
    "Phoenix",
    "Houston",
    "Memphis",
];

/// Groups of related words, one group per line of the bundled table.
pub fn synonym_groups() -> &'static [Vec<&'static str>] {
    static GROUPS: OnceLock<Vec<Vec<&'static str>>> = OnceLock::new();
    GROUPS.get_or_init(|| {
        include_str!("../../data/synonyms.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.split(',').map(str::trim).collect())
            .collect()
    })
}

pub(crate) struct Instance {
    pub root: DomNode,
    pub utterance: String,
    pub goal: Goal,
}

const AREA: BBox = BBox::new(0, 50, 160, 110);

/// Path of the `i`-th widget inside the task area.
fn widget(i: usize) -> NodePath {
    vec![0, 1, i]
}

fn page(utterance: &str, widgets: Vec<DomNode>) -> DomNode {
    DomNode::new("body", BBox::page()).with_child(
        DomNode::new("div", BBox::page())
            .with_attr("id", "wrap")
            .with_child(
                DomNode::new("div", BBox::new(0, 0, 160, 50))
                    .with_attr("id", "query")
                    .with_text(utterance),
            )
            .with_child(DomNode::new("div", AREA).with_attr("id", "area").with_children(widgets)),
    )
}

fn submit_button(bbox: BBox) -> DomNode {
    DomNode::new("button", bbox)
        .with_attr("id", "subbtn")
        .with_text("Submit")
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str], n: usize) -> Vec<&'a str> {
    pool.choose_multiple(rng, n).copied().collect()
}

pub(crate) fn generate(task: TaskName, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stable_hash(task.as_str())));
    match task {
        TaskName::ClickButton => click_button(&mut rng),
        TaskName::ClickCheckboxes => click_checkboxes(&mut rng),
        TaskName::ClickCheckboxesSoft => click_checkboxes_soft(&mut rng),
        TaskName::ChooseColor => choose_color(&mut rng),
        TaskName::EnterText => enter_text(&mut rng),
        TaskName::UseSpinner => use_spinner(&mut rng),
        TaskName::ClickCollapsible => click_collapsible(&mut rng),
        TaskName::BookFlightSimplified => book_flight(&mut rng),
    }
}

fn click_button(rng: &mut ChaCha8Rng) -> Instance {
    let labels = pick(rng, &WORDS, 4);
    let mut slots = [(8, 60), (84, 60), (8, 100), (84, 100)];
    slots.shuffle(rng);
    let target = rng.gen_range(0..4);
    let utterance = format!("Click on the \"{}\" button.", labels[target]);
    let buttons = labels
        .iter()
        .zip(slots)
        .map(|(l, (x, y))| DomNode::new("button", BBox::new(x, y, 68, 24)).with_text(*l))
        .collect();
    Instance {
        root: page(&utterance, buttons),
        utterance,
        goal: Goal::ClickButton {
            buttons: (0..4).map(widget).collect(),
            target,
        },
    }
}

fn checkbox(i: usize, word: &str) -> DomNode {
    DomNode::new("input_checkbox", BBox::new(10, 56 + 16 * i as i32, 100, 12)).with_text(word)
}

fn checkbox_instance(utterance: String, words: Vec<&str>, targets: Vec<usize>) -> Instance {
    let n = words.len();
    let mut widgets: Vec<DomNode> = words.iter().enumerate().map(|(i, w)| checkbox(i, w)).collect();
    widgets.push(submit_button(BBox::new(10, 138, 60, 18)));
    Instance {
        root: page(&utterance, widgets),
        utterance,
        goal: Goal::Checkboxes {
            boxes: (0..n).map(widget).collect(),
            targets,
            submit: widget(n),
        },
    }
}

fn click_checkboxes(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(3..=5);
    let k = rng.gen_range(1..=3.min(n));
    let words = pick(rng, &WORDS, n);
    let mut targets: Vec<usize> = rand::seq::index::sample(rng, n, k).into_vec();
    targets.sort_unstable();
    let listed: Vec<&str> = targets.iter().map(|&i| words[i]).collect();
    let utterance = format!("Select {} and click Submit.", listed.join(", "));
    checkbox_instance(utterance, words, targets)
}

fn click_checkboxes_soft(rng: &mut ChaCha8Rng) -> Instance {
    let groups = synonym_groups();
    let n = rng.gen_range(3..=5);
    let k = rng.gen_range(1..=2);
    let chosen: Vec<usize> = rand::seq::index::sample(rng, groups.len(), n).into_vec();
    // first k groups are targets: cue one member, display another
    let mut cues = Vec::new();
    let mut shown: Vec<(&str, bool)> = Vec::new();
    for (j, &g) in chosen.iter().enumerate() {
        let members = pick(rng, &groups[g], 2);
        if j < k {
            cues.push(members[0]);
            shown.push((members[1], true));
        } else {
            shown.push((members[0], false));
        }
    }
    shown.shuffle(rng);
    let targets = shown.iter().enumerate().filter(|(_, s)| s.1).map(|(i, _)| i).collect();
    let utterance = format!("Select words similar to {} and click Submit.", cues.join(", "));
    checkbox_instance(utterance, shown.into_iter().map(|s| s.0).collect(), targets)
}

fn choose_color(rng: &mut ChaCha8Rng) -> Instance {
    let colors = pick(rng, &COLORS, 4);
    let target = rng.gen_range(0..4);
    let utterance = format!("Select {} from the colors and click Submit.", colors[target]);
    let mut widgets: Vec<DomNode> = colors
        .iter()
        .enumerate()
        .map(|(i, c)| {
            DomNode::new("div", BBox::new(8 + 38 * i as i32, 60, 30, 30))
                .with_attr("class", "color")
                .with_attr("id", *c)
        })
        .collect();
    widgets.push(submit_button(BBox::new(10, 110, 60, 20)));
    Instance {
        root: page(&utterance, widgets),
        utterance,
        goal: Goal::ChooseColor {
            swatches: (0..4).map(widget).collect(),
            target,
            submit: widget(4),
        },
    }
}

fn enter_text(rng: &mut ChaCha8Rng) -> Instance {
    let word = *WORDS.choose(rng).unwrap();
    let utterance = format!("Enter \"{word}\" into the text field and press Submit.");
    let widgets = vec![
        DomNode::new("input_text", BBox::new(10, 60, 140, 20)).with_attr("id", "tt"),
        submit_button(BBox::new(10, 100, 60, 20)),
    ];
    Instance {
        root: page(&utterance, widgets),
        utterance,
        goal: Goal::EnterText {
            input: widget(0),
            text: word.to_string(),
            submit: widget(1),
        },
    }
}

fn use_spinner(rng: &mut ChaCha8Rng) -> Instance {
    let target: i64 = rng.gen_range(1..=6);
    let utterance = format!("Increment the spinner to {target} and click submit.");
    let widgets = vec![
        DomNode::new("input_text", BBox::new(10, 60, 80, 20))
            .with_attr("class", "spinner")
            .with_value("0"),
        DomNode::new("a", BBox::new(92, 60, 20, 10))
            .with_attr("class", "ui-spinner-up")
            .with_text("up"),
        DomNode::new("a", BBox::new(92, 70, 20, 10))
            .with_attr("class", "ui-spinner-down")
            .with_text("down"),
        submit_button(BBox::new(10, 100, 60, 20)),
    ];
    Instance {
        root: page(&utterance, widgets),
        utterance,
        goal: Goal::Spinner {
            input: widget(0),
            up: widget(1),
            down: widget(2),
            target,
            submit: widget(3),
        },
    }
}

fn click_collapsible(rng: &mut ChaCha8Rng) -> Instance {
    let utterance = "Expand the section below and click submit.".to_string();
    let section_no = rng.gen_range(1..=9);
    let lorem = pick(rng, &WORDS, 5).join(" ");
    let content_box = BBox::new(10, 80, 140, 70);
    let para_box = BBox::new(15, 84, 130, 36);
    let submit_box = BBox::new(15, 124, 60, 20);
    let collapsed = BBox::new(content_box.x, content_box.y, 0, 0);
    let widgets = vec![
        DomNode::new("h3", BBox::new(10, 60, 140, 16))
            .with_attr("class", "collapsible-header")
            .with_text(format!("Section #{section_no}")),
        DomNode::new("div", collapsed)
            .with_attr("class", "collapsible-content")
            .with_child(DomNode::new("p", collapsed).with_text(lorem))
            .with_child(submit_button(collapsed)),
    ];
    let content = widget(1);
    let para = [content.clone(), vec![0]].concat();
    let submit = [content.clone(), vec![1]].concat();
    Instance {
        root: page(&utterance, widgets),
        utterance,
        goal: Goal::Collapsible {
            header: widget(0),
            section: vec![(content, content_box), (para, para_box), (submit.clone(), submit_box)],
            submit,
        },
    }
}

fn book_flight(rng: &mut ChaCha8Rng) -> Instance {
    let dep = *CITIES.choose(rng).unwrap();
    let dest = *CITIES.iter().filter(|c| **c != dep).collect::<Vec<_>>().choose(rng).unwrap();
    let day: u32 = rng.gen_range(1..=28);
    let ret: u32 = rng.gen_range(day..=28);
    let passengers: u32 = rng.gen_range(1..=4);
    let ticket = if rng.gen_bool(0.5) { "Return flight" } else { "One-way" };
    let utterance = format!(
        "{{\"Departure City\":\"{dep}\",\"Destination City\":\"{dest}\",\"Ticket Type\":\"{ticket}\",\"Departure Day\":{day},\"Returning Day\":{ret},\"Passengers\":{passengers}}}"
    );
    let city_options = |rng: &mut ChaCha8Rng, target: &'static str| {
        let mut opts: Vec<&'static str> = CITIES
            .iter()
            .copied()
            .filter(|c| *c != target)
            .collect::<Vec<_>>()
            .choose_multiple(rng, 4)
            .copied()
            .collect();
        opts.push(target);
        opts.shuffle(rng);
        opts
    };
    let city_select = |id: &str, x: i32, opts: Vec<&str>| {
        DomNode::new("select", BBox::new(x, 55, 70, 50))
            .with_attr("id", id)
            .with_attr("class", "select")
            .with_children(opts.into_iter().enumerate().map(|(i, c)| {
                DomNode::new("option", BBox::new(x, 55 + 10 * i as i32, 70, 10)).with_text(c)
            }))
    };
    let dep_opts = city_options(rng, dep);
    let dest_opts = city_options(rng, dest);
    let days = DomNode::new("select", BBox::new(5, 110, 150, 45))
        .with_attr("id", "departure-day")
        .with_attr("class", "select")
        .with_children((0..28).map(|i| {
            let (r, c) = (i / 7, i % 7);
            DomNode::new("option", BBox::new(5 + 21 * c, 110 + 11 * r, 21, 11)).with_text((i + 1).to_string())
        }));
    let widgets = vec![
        city_select("departure-city", 5, dep_opts),
        city_select("destination-city", 85, dest_opts),
        days,
    ];
    Instance {
        root: page(&utterance, widgets),
        utterance,
        goal: Goal::BookFlight {
            selects: (0..3).map(widget).collect(),
            targets: vec![dep.to_string(), dest.to_string(), day.to_string()],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::{assign_refs, rasterize, RefMode};

    #[test]
    fn every_instance_is_a_valid_page() {
        for task in TaskName::ALL {
            for seed in 0..50 {
                let inst = generate(task, seed);
                let s = assign_refs(inst.root, RefMode::Ordered, 0).unwrap();
                rasterize(&s).unwrap();
            }
        }
    }

    #[test]
    fn synonym_table_is_loaded() {
        let groups = synonym_groups();
        assert!(groups.len() >= 50);
        assert!(groups.iter().all(|g| g.len() >= 2));
    }

    #[test]
    fn word_lists_avoid_plan_connectives() {
        for w in WORDS.iter().chain(COLORS.iter()) {
            assert!(!["and", "then", "submit"].contains(w));
        }
    }
}
