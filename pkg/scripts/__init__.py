# Configuration, fixtures, index loading and the operator CLI
