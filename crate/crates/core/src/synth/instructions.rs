use super::{Direction, MotionFamily};

pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [205, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 70, 205]),
    ("yellow", [225, 205, 40]),
    ("orange", [235, 125, 30]),
    ("purple", [145, 60, 175]),
];

pub const OBJECTS: [&str; 6] = ["block", "cup", "can", "sponge", "box", "ball"];

pub fn direction_phrase(d: Direction) -> &'static str {
    match d {
        Direction::Left => "to the left",
        Direction::Right => "to the right",
        Direction::Forward => "forward",
        Direction::Backward => "backward",
    }
}

/// Short imperative, multi-step and natural-request phrasings.
fn templates(family: MotionFamily) -> [&'static str; 3] {
    match family {
        MotionFamily::LinearTransport => [
            "push the {color} {object} {dir}",
            "reach the {color} {object} then push it {dir} and stop",
            "could you slide the {color} {object} {dir}",
        ],
        MotionFamily::ArcTransport => [
            "swing the {color} {object} {dir}",
            "grab the {color} {object} then swing it along an arc and set it down {dir}",
            "please carry the {color} {object} {dir} along a curved path",
        ],
        MotionFamily::PickPlace => [
            "pick up the {color} {object} and put it {dir}",
            "grasp the {color} {object} then lift it and place it down {dir}",
            "can you pick the {color} {object} up and place it {dir}",
        ],
        MotionFamily::Sweep => [
            "sweep the {color} {object} {dir}",
            "put the gripper behind the {color} {object} then sweep it {dir} with a wiggle",
            "would you sweep the {color} {object} {dir} for me",
        ],
    }
}

pub fn fill(template: &str, color: &str, object: &str, direction: Direction) -> String {
    template
        .replace("{color}", color)
        .replace("{object}", object)
        .replace("{dir}", direction_phrase(direction))
}

/// The three instruction phrasings for a scene, or the single filled
/// `override_template` when given.
pub fn instructions_for(
    family: MotionFamily,
    color: &str,
    object: &str,
    direction: Direction,
    override_template: Option<&str>,
) -> Vec<String> {
    match override_template {
        Some(t) => vec![fill(t, color, object, direction)],
        None => templates(family)
            .iter()
            .map(|t| fill(t, color, object, direction))
            .collect(),
    }
}
