fn main() {
    println!("warpsdf");
}
