//! Prompt fixtures with geometric phrases in varied positions.

#![allow(dead_code)]

const SUBJECTS: [&str; 10] = [
    "A Leopard tank on a muddy forest track",
    "An M109 howitzer parked beside a hangar",
    "A Boxer armoured vehicle crossing a shallow river",
    "A Scania military truck in light snow",
    "A Fennek scout car under camouflage netting",
    "A CV90 moving through tall grass",
    "A BTR-80 on a dusty desert road",
    "A Patria vehicle near a checkpoint",
    "An M1 Abrams in an urban street",
    "A DAF YA 4440 truck at a supply depot",
];

const GEOMETRY: [&str; 14] = [
    "front three-quarter view",
    "seen from the rear three-quarter angle",
    "Side profile",
    "rear view",
    "front perspective",
    "elevated view",
    "ground-level shot",
    "aerial perspective from a drone",
    "extreme close-up of the hull",
    "close-up",
    "at a medium tactical distance",
    "distant reconnaissance view",
    "front quarter angle",
    "side below the horizon line",
];

const EXTRAS: [&str; 5] = [
    "overcast daylight",
    "photorealistic, sharp focus",
    "low morning sun",
    "wet asphalt reflections",
    "dust in the air",
];

/// 50 prompts; every one but the last five contains a lexicon phrase.
pub fn geometry_prompts() -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..45 {
        let s = SUBJECTS[i % SUBJECTS.len()];
        let g = GEOMETRY[i % GEOMETRY.len()];
        let e = EXTRAS[i % EXTRAS.len()];
        out.push(match i % 5 {
            0 => format!("{s}, {g}, {e}."),
            1 => format!("{g}, {s}. {e}."),
            2 => format!("{s}. {e}, {g}."),
            3 => format!("{s},  {g} ,{e}"),
            _ => format!("{s}, {}, {e}, {g}.", GEOMETRY[(i + 3) % GEOMETRY.len()]),
        });
    }
    for i in 0..5 {
        out.push(format!("{}, {}.", SUBJECTS[i], EXTRAS[i]));
    }
    out
}
