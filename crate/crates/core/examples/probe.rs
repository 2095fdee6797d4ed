// scratch: emit preset toml files
fn main() {}
