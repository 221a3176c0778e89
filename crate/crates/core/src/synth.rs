//! Deterministic synthetic "judgment" corpus.
//!
//! Every summary is built from fixed pattern phrases for its case type plus
//! fact slots (items, places, amounts, mitigation) that are copied from the
//! document, so pattern words and facts are separable by construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::text::RawRecord;

const FILLER: &[&str] = &[
    "the police collected evidence at the scene .",
    "witnesses confirmed the time of the incident .",
    "the case was transferred to the prosecutor on DATE .",
    "the victim reported the case to the police .",
    "the defendant was detained on DATE .",
    "the evidence was examined in court .",
];

const PLACES: &[&str] = &["market", "station", "dormitory", "hospital", "restaurant", "park"];
const ITEMS: &[&str] = &["bicycle", "phone", "laptop", "wallet", "necklace", "watch", "camera"];
const SCHEMES: &[&str] = &["loan", "investment", "lottery", "rental", "job"];
const USES: &[&str] = &["gambling", "travel", "debts", "shopping"];
const WEAPONS: &[&str] = &["stick", "knife", "brick", "bottle", "chair"];
const VEHICLES: &[&str] = &["car", "truck", "motorcycle", "van"];
const CONDITIONS: &[&str] = &["while drunk", "at high speed", "without a license"];
const ROADS: &[&str] = &["highway", "bridge", "avenue", "crossing"];

#[derive(Clone, Copy)]
enum Mitigation {
    Confessed,
    Surrendered,
    Compensated,
    None,
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty slot list")
}

/// Generates `n` records from `seed`; identical inputs give identical output.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<RawRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_record(&mut rng)).collect()
}

fn synth_record(rng: &mut ChaCha8Rng) -> RawRecord {
    let level = if rng.gen_bool(0.5) { "large" } else { "huge" };
    let (facts, pattern) = match rng.gen_range(0..4) {
        0 => {
            let (place, item) = (pick(rng, PLACES), pick(rng, ITEMS));
            (
                vec![
                    format!("on DATE , the defendant PERS went to the {place} and secretly took a {item} belonging to PERS ."),
                    format!("the {item} was worth MONEY , a {level} amount ."),
                ],
                format!("the court held that the defendant PERS stole a {item} from the {place} , the amount was {level} , and the act constituted the crime of theft ."),
            )
        }
        1 => {
            let (scheme, used) = (pick(rng, SCHEMES), pick(rng, USES));
            (
                vec![
                    format!("on DATE , the defendant PERS posted a fake {scheme} offer and persuaded PERS to transfer MONEY , a {level} amount ."),
                    format!("the money was spent on {used} ."),
                ],
                format!("the court held that the defendant PERS cheated PERS with a fake {scheme} offer , the amount was {level} , and the act constituted the crime of fraud ."),
            )
        }
        2 => {
            let (place, weapon) = (pick(rng, PLACES), pick(rng, WEAPONS));
            let injury = if rng.gen_bool(0.5) { "minor" } else { "serious" };
            (
                vec![
                    format!("on DATE , the defendant PERS quarreled with PERS at the {place} and hit him with a {weapon} ."),
                    format!("the victim suffered {injury} injuries ."),
                ],
                format!("the court held that the defendant PERS injured PERS with a {weapon} , causing {injury} injuries , and the act constituted the crime of intentional injury ."),
            )
        }
        _ => {
            let (vehicle, cond, road) = (pick(rng, VEHICLES), pick(rng, CONDITIONS), pick(rng, ROADS));
            (
                vec![
                    format!("on DATE , the defendant PERS drove a {vehicle} {cond} on the {road} and hit PERS ."),
                    "the victim was sent to the hospital .".to_string(),
                ],
                format!("the court held that the defendant PERS drove a {vehicle} {cond} and caused an accident , and the act constituted the crime of dangerous driving ."),
            )
        }
    };

    let mitigation = match rng.gen_range(0..4) {
        0 => Mitigation::Confessed,
        1 => Mitigation::Surrendered,
        2 => Mitigation::Compensated,
        _ => Mitigation::None,
    };
    let (mit_doc, mit_sum) = match mitigation {
        Mitigation::Confessed => (
            "after the arrest , PERS confessed the facts .",
            Some("PERS confessed , so the punishment is lighter ."),
        ),
        Mitigation::Surrendered => (
            "PERS surrendered to the police on DATE .",
            Some("PERS surrendered , so the punishment is lighter ."),
        ),
        Mitigation::Compensated => (
            "PERS paid MONEY to compensate the victim .",
            Some("PERS compensated the victim , so the punishment is lighter ."),
        ),
        Mitigation::None => ("PERS refused to admit the facts .", None),
    };
    let term = if rng.gen_bool(0.5) { "YEARS" } else { "MONTHS" };

    let mut doc: Vec<String> = facts;
    doc.push(mit_doc.to_string());
    doc.push(format!("the prosecutor suggested {term} of imprisonment ."));
    let fillers = rng.gen_range(0..=2);
    for _ in 0..fillers {
        let at = rng.gen_range(1..=doc.len());
        doc.insert(at, pick(rng, FILLER).to_string());
    }

    let mut summary = vec![pattern];
    if let Some(m) = mit_sum {
        summary.push(m.to_string());
    }
    summary.push(format!("the defendant PERS is sentenced to {term} of imprisonment ."));
    RawRecord::new(doc.join(" "), summary.join(" "))
}
