use crate::encoders::Vocab;

/// Object names; class `c` is called `CLASS_NAMES[c]`.
pub const CLASS_NAMES: [&str; 24] = [
    "fabric", "tile", "wood", "carpet", "leather", "grid", "panel", "board", "plate", "sheet", "brick", "mesh", "foil",
    "felt", "cork", "slate", "marble", "canvas", "paper", "rubber", "glass", "steel", "ceramic", "plastic",
];

/// Texture families, in the order classes cycle through them.
pub const PATTERNS: [&str; 4] = ["striped", "checkered", "mottled", "graded"];

/// Defect taxonomy; the defect type id indexes this table.
pub const DEFECT_NAMES: [&str; 4] = ["scratch", "stain", "contamination", "hole"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SegOnly,
    SegAnswer,
    Vqa,
}

impl TaskKind {
    pub fn has_seg(self) -> bool {
        !matches!(self, TaskKind::Vqa)
    }
}

pub fn normal_text(class: &str, pattern: &str) -> String {
    format!("a normal {class} has a uniform {pattern} texture .")
}

/// Short defect description used as the textual answer.
pub fn description(class: &str, defect_type: i32) -> String {
    if defect_type < 0 {
        format!("no , the {class} looks normal .")
    } else {
        format!(
            "yes , there is a {} on the {class} .",
            DEFECT_NAMES[defect_type as usize]
        )
    }
}

/// Instruction and target answer of a task for one sample. Segmentation
/// targets end with `<seg>`; question answering targets carry none.
pub fn task_texts(kind: TaskKind, class: &str, normal: &str, defect_type: i32) -> (String, String) {
    let ask =
        format!("{normal} are there any abnormalities in the {class} ? please output the defect segmentation result");
    match kind {
        TaskKind::SegOnly => (format!("{ask} ."), "it is <seg>".into()),
        TaskKind::SegAnswer => (
            format!("{ask} and describe the defect ."),
            format!("{} it is <seg>", description(class, defect_type)),
        ),
        TaskKind::Vqa => (
            format!("{normal} is there any defect in the {class} ?"),
            description(class, defect_type),
        ),
    }
}

/// Every word any template can produce, for any class and defect.
pub fn vocabulary() -> Vocab {
    let mut corpus = Vec::new();
    for class in CLASS_NAMES {
        for pattern in PATTERNS {
            let normal = normal_text(class, pattern);
            for d in -1..DEFECT_NAMES.len() as i32 {
                for kind in [TaskKind::SegOnly, TaskKind::SegAnswer, TaskKind::Vqa] {
                    let (i, a) = task_texts(kind, class, &normal, d);
                    corpus.push(i);
                    corpus.push(a);
                }
            }
        }
    }
    Vocab::new(corpus)
}
