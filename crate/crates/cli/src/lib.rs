pub fn run_cli(_argv: &[String]) -> i32 { 0 }
