from cgxsim.cli import main

main()
