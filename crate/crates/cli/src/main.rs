fn main() {
    println!("minimt");
}
