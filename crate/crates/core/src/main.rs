fn main() {
    println!("multicell");
}
