#include "app/commands.hpp"

int main(int argc, char** argv) { return bayeslayers::app::run_cli(argc, argv); }
