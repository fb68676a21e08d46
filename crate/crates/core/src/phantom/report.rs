//! Template reports and the keyword oracle that reads labels back out of them.

use super::{OpacitySize, PhantomAttrs, Side};
use crate::numcore::RngStream;

const EFFUSION: &[&str] = &["effusion is present .", "effusion seen .", "effusion is seen ."];
const CARDIOMEGALY: &[&str] = &[
    "cardiomegaly is present .",
    "cardiomegaly .",
    "the heart is enlarged .",
    "heart is enlarged .",
];
const OPACITY: &[&str] = &[
    "a {size} opacity in the {side} lung .",
    "{side} lung {size} opacity .",
    "{size} round opacity in the {side} lung .",
];
const DEVICE: &[&str] = &["device is seen .", "a support device is seen .", "support device is present ."];

fn pick<'a>(stream: &mut RngStream, options: &[&'a str]) -> &'a str {
    options[stream.below(options.len())]
}

/// Writes a report for `attrs`: one sentence per positive finding in a
/// randomly chosen phrasing, each absent finding mentioned as a negative
/// with probability one half, sentences in random order.
pub fn make_report(attrs: &PhantomAttrs, stream: &mut RngStream) -> String {
    let mut sentences: Vec<String> = Vec::new();
    let mut finding = |present: bool, positive: String, negative: &str, s: &mut RngStream| {
        if present {
            sentences.push(positive);
        } else if s.bernoulli(0.5) {
            sentences.push(negative.to_string());
        }
    };
    let eff = pick(stream, EFFUSION).to_string();
    finding(attrs.effusion, eff, "no effusion .", stream);
    let card = pick(stream, CARDIOMEGALY).to_string();
    finding(attrs.cardiomegaly, card, "no cardiomegaly .", stream);
    let template = pick(stream, OPACITY);
    let opacity = match attrs.opacity {
        Some(o) => template
            .replace(
                "{size}",
                match o.size {
                    OpacitySize::Small => "small",
                    OpacitySize::Large => "large",
                },
            )
            .replace(
                "{side}",
                match o.side {
                    Side::Left => "left",
                    Side::Right => "right",
                },
            ),
        None => String::new(),
    };
    finding(attrs.opacity.is_some(), opacity, "no opacity .", stream);
    let dev = pick(stream, DEVICE).to_string();
    finding(attrs.device, dev, "no device .", stream);

    let lungs_clear = !attrs.effusion && attrs.opacity.is_none();
    if lungs_clear && (sentences.is_empty() || stream.bernoulli(0.5)) {
        sentences.push("lungs clear .".to_string());
    }
    stream.shuffle(&mut sentences);
    sentences.join(" ")
}

/// Reads the four label bits back from report text by keyword matching.
/// A sentence opening with "no" is a negative mention.
pub fn labels_from_report(report: &str) -> [u8; 4] {
    let mut labels = [0u8; 4];
    for sentence in report.split('.') {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        if words.first() == Some(&"no") {
            continue;
        }
        for w in words {
            match w {
                "effusion" => labels[0] = 1,
                "cardiomegaly" | "enlarged" => labels[1] = 1,
                "opacity" => labels[2] = 1,
                "device" => labels[3] = 1,
                _ => {}
            }
        }
    }
    labels
}
