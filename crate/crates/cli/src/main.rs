fn main() { println!("coeffdyn"); }
