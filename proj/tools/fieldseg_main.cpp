// placeholder; full CLI is wired up once the pipeline modules land
int main() { return 0; }
