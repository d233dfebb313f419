use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Runtime,
    Usage,
    Config,
    Data,
    Io,
    Llm,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Runtime => 1,
            Category::Usage => 2,
            Category::Config => 3,
            Category::Data => 4,
            Category::Io => 5,
            Category::Llm => 6,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Category::Runtime => "runtime",
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Data => "data",
            Category::Io => "io",
            Category::Llm => "llm",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.category.label(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<fairpref::Error> for CliError {
    fn from(e: fairpref::Error) -> Self {
        use fairpref::Error as E;
        let category = match &e {
            E::Record { .. } | E::Manifest(_) | E::Checkpoint(_) | E::Json(_) => Category::Data,
            E::Io { .. } => Category::Io,
            E::Llm(_) => Category::Llm,
            E::InvalidParameter(_) => Category::Config,
            _ => Category::Runtime,
        };
        Self::new(category, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(Category::Io, e.to_string())
    }
}
